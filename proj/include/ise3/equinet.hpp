#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ise3/diff.hpp"
#include "ise3/fiber.hpp"
#include "ise3/so3.hpp"
#include "ise3/toysim.hpp"

namespace ise3::net {

// Fixed affine standardization of the radial network inputs (r, a).
inline constexpr double kRadialCenter = 1.5;
inline constexpr double kRadialScale = 1.0;
inline constexpr double kParamCenter = 0.55;
inline constexpr double kParamScale = 0.26;
inline constexpr double kGateEps = 1e-8;
inline constexpr double kNormEps = 1e-8;

struct ModelConfig {
  int n_blocks = 3;
  int layers_per_block = 4;
  int max_type = 2;
  int channels = 4;
  int heads = 1;
  int radial_hidden = 32;
  /// Neighborhood size; 0 means fully connected (n - 1).
  int K = 0;
  bool basis_gradients = true;

  static ModelConfig single_pass();
  static ModelConfig iterative();

  Fiber hidden_fiber() const { return Fiber::uniform(max_type, channels); }
  int total_layers() const { return n_blocks * layers_per_block; }
  int neighbors(int n) const { return K == 0 ? n - 1 : K; }
  /// Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in a fixed order (the order of initialization and
/// of the checkpoint file).
class ModelParams {
 public:
  struct Entry {
    std::string name;
    diff::Tensor value;
  };

  void add(std::string name, diff::Tensor value);
  const diff::Tensor& get(const std::string& name) const;
  diff::Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  /// Throws ArgumentError for unknown names.
  std::size_t index_of(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total number of scalars.
  std::size_t count() const;

  bool operator==(const ModelParams& other) const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit gate scales and zero
/// output heads. Deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Number of scalars init_params would produce.
std::size_t parameter_count(const ModelConfig& config);

/// Parameters placed on a tape, as leaves or as constants.
class BoundParams {
 public:
  BoundParams(diff::Tape& tape, const ModelParams& params, bool trainable);
  /// Uses existing tape values, one per entry of `params` in order.
  BoundParams(const ModelParams& params, std::vector<diff::Var> vars);

  const diff::Var& get(const std::string& name) const;
  const std::vector<diff::Var>& vars() const { return vars_; }
  /// Per-entry gradients in parameter order (zeros where unreachable).
  std::vector<diff::Tensor> gradients(const diff::Gradients& g) const;

 private:
  const ModelParams* params_;
  std::vector<diff::Var> vars_;
};

/// Parameters of one attention layer.
struct LayerParams {
  diff::Var w1, b1, w2, b2, w3, b3;  // radial trunk and key/value heads
  std::vector<diff::Var> query;      // per type, mult x mult
  std::vector<diff::Var> skip;       // per type, mult x mult
  diff::Var gate_scale, gate_bias;   // 1 x (channels of types > 0)
  diff::Var head;                    // 1 x mult(1)
};

LayerParams layer_params(const BoundParams& p, int block, int layer, const ModelConfig& config);

// ---------------------------------------------------------------- fused ops
// Node features are n x fiber.dim() tensors in the Fiber layout. Edges are
// node-major: edge e = i*K + k has destination i and source nb[i][k].

/// Channel mixing within each type. `weights` holds one (mult_out x mult_in)
/// matrix per type present in both fibers, ascending; other output types are zero.
diff::Var self_interaction(const diff::Var& f, const Fiber& fin, const Fiber& fout, std::span<const diff::Var> weights);

/// Radial kernel coefficient count per head: sum over kernel blocks of
/// J_count * mult_out * mult_in.
std::size_t radial_width(const so3::BasisLayout& layout);

/// Equivariant convolution of source features along every edge for several
/// kernels sharing one basis (keys and values). basis: E x layout.size();
/// phi: E x (kernels * radial_width) with per-block coefficients ordered
/// (J, c_out, c_in); f: n x fin.dim(). Returns E x (kernels * fout.dim()).
diff::Var edge_conv(const diff::Var& basis, const diff::Var& phi, const diff::Var& f, std::span<const std::size_t> src,
                    const so3::BasisLayout& layout, int kernels);

/// logits[i, k] = q_i . key_{iK+k} * scale, returned as n x K.
diff::Var edge_dot(const diff::Var& q, const diff::Var& keys, std::size_t K, double scale);

/// out_i = sum_k w[i, k] * values_{iK+k}.
diff::Var segment_weighted_sum(const diff::Var& w, const diff::Var& values);

/// Divides every type block of a node by sqrt(mean over its channels of |v_c|^2 + eps).
/// Invariant scale, so directions and equivariance are untouched.
diff::Var type_norm(const diff::Var& f, const Fiber& fiber);

/// relu on type 0; sigmoid(s_c |v| + b_c) v on every channel of higher types.
diff::Var norm_gate(const diff::Var& f, const diff::Var& scale, const diff::Var& bias, const Fiber& fiber);

/// sum_c w[c] * f_{type l, channel c}: n x (2l+1).
diff::Var type_readout(const diff::Var& f, const diff::Var& w, const Fiber& fiber, int l);

// ---------------------------------------------------------------- model

enum class GeometryMode {
  differentiable,  // gradients flow through bases and radial inputs
  stopped,         // block >= 2 geometry behind stop_gradient
  constant,        // block >= 2 geometry rebuilt from plain values (reference)
};

/// Edge data shared by every layer of a block.
struct BlockGeometry {
  std::size_t n = 0;
  std::size_t K = 0;
  toy::Neighborhoods neighborhoods;
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;
  diff::Var basis;      // E x layout.size()
  diff::Var radial_in;  // E x 2 standardized (r, a)
};

BlockGeometry build_geometry(const diff::Var& x, const toy::Interactions& a, std::size_t K,
                             const so3::BasisLayout& layout);

struct LayerOutput {
  diff::Var features;
  diff::Var attention;  // n x K
  diff::Var head;       // n x 3 in the degree-1 harmonic order
};

LayerOutput attention_layer(const BlockGeometry& g, const diff::Var& f, const LayerParams& p, const Fiber& fiber,
                            const so3::BasisLayout& layout);

struct BlockOutput {
  diff::Var features;
  diff::Var delta;  // n x 3 Cartesian
  std::vector<diff::Var> attention;
};

BlockOutput transformer_block(const BlockGeometry& g, const diff::Var& f, std::span<const LayerParams> layers,
                              const Fiber& fiber, const so3::BasisLayout& layout);

struct ForwardResult {
  std::vector<diff::Var> positions;  // x^0 .. x^{n_blocks}, centred frame
  std::vector<diff::Var> deltas;
  std::vector<diff::Var> features;  // output fiber of every block
  std::vector<diff::Var> attention;  // every layer
  std::vector<toy::Neighborhoods> neighborhoods;
  diff::Var energy;                  // total energy of the final positions
};

GeometryMode default_mode(const ModelConfig& config);

/// Runs every block. `x0` is an n x 3 tape value (constant or leaf); it is
/// centred before the first block.
ForwardResult iterative_forward(const diff::Var& x0, const toy::Interactions& a, const BoundParams& params,
                                const ModelConfig& config, GeometryMode mode);

/// Convenience: positions from the instance as a tape constant.
ForwardResult iterative_forward(diff::Tape& tape, const toy::ProblemInstance& inst, const BoundParams& params,
                                const ModelConfig& config);

/// Initial node features: the scalar 1 in channel 0 of type 0, zeros elsewhere.
diff::Tensor input_features(std::size_t n, const Fiber& fiber);

/// Applies D^l(R) to every type-l block of an n x fiber.dim() feature matrix.
diff::RowMatrix rotate_features(const Eigen::Ref<const diff::RowMatrix>& f, const Fiber& fiber, const so3::Rotation& R);

}  // namespace ise3::net
