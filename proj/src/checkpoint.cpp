#include "ise3/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include "ise3/errors.hpp"

namespace ise3::ckpt {

using diff::Tensor;

namespace {

constexpr char kMagic[4] = {'I', 'S', 'E', '3'};
const std::string kMetaPrefix = "meta/";
const std::string kExtraPrefix = "meta/extra/";

// Config fields in file order.
std::vector<std::pair<const char*, int net::ModelConfig::*>> int_fields() {
  return {{"n_blocks", &net::ModelConfig::n_blocks},       {"layers_per_block", &net::ModelConfig::layers_per_block},
          {"max_type", &net::ModelConfig::max_type},       {"channels", &net::ModelConfig::channels},
          {"heads", &net::ModelConfig::heads},             {"radial_hidden", &net::ModelConfig::radial_hidden},
          {"K", &net::ModelConfig::K}};
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
void put_record(std::string& out, const std::string& name, const Tensor& t) {
  put_u64(out, name.size());
  out += name;
  put_u64(out, t.rank());
  for (std::size_t d : t.shape()) put_u64(out, d);
  for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  std::uint64_t u(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + b])) << (8 * b);
    pos_ += bytes;
    return v;
  }
  std::string str(std::uint64_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > s_.size() - pos_) throw IoError("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

int as_int(const Tensor& t, const std::string& name) {
  const double v = t.item();
  if (v != std::floor(v) || std::abs(v) > 1e9) throw IoError("checkpoint: non-integer meta value for " + name);
  return static_cast<int>(v);
}

}  // namespace

std::string encode(const Checkpoint& c) {
  std::string out(kMagic, 4);
  put_u32(out, kFormatVersion);
  const auto fields = int_fields();
  put_u64(out, fields.size() + 1 + c.extra.size() + c.params.size());
  for (const auto& [name, member] : fields) put_record(out, kMetaPrefix + name, Tensor::scalar(c.config.*member));
  put_record(out, kMetaPrefix + "basis_gradients", Tensor::scalar(c.config.basis_gradients ? 1.0 : 0.0));
  for (const auto& [k, v] : c.extra) put_record(out, kExtraPrefix + k, Tensor::scalar(v));
  for (const auto& e : c.params.entries()) put_record(out, e.name, e.value);
  return out;
}

Checkpoint decode(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw IoError("checkpoint: bad magic");
  const auto version = r.u(4);
  if (version != kFormatVersion) throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint64_t count = r.u(8);

  Checkpoint c;
  std::map<std::string, Tensor> meta;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.u(8));
    const std::uint64_t rank = r.u(8);
    if (rank > 8) throw IoError("checkpoint: implausible rank for " + name);
    Tensor::Shape shape;
    std::uint64_t size = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape.push_back(r.u(8));
      size *= shape.back();
    }
    if (size > r.remaining() / 8) throw IoError("checkpoint: truncated values for " + name);
    std::vector<double> values(size);
    for (double& v : values) v = std::bit_cast<double>(r.u(8));
    Tensor t(std::move(shape), std::move(values));
    if (name.starts_with(kMetaPrefix)) {
      if (name.starts_with(kExtraPrefix)) {
        c.extra[name.substr(kExtraPrefix.size())] = t.item();
      } else {
        meta.emplace(name.substr(kMetaPrefix.size()), std::move(t));
      }
    } else {
      c.params.add(name, std::move(t));
    }
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");

  auto field = [&meta](const std::string& name) -> const Tensor& {
    auto it = meta.find(name);
    if (it == meta.end()) throw IoError("checkpoint: missing meta/" + name);
    return it->second;
  };
  for (const auto& [name, member] : int_fields()) c.config.*member = as_int(field(name), name);
  c.config.basis_gradients = field("basis_gradients").item() != 0.0;
  c.config.validate();

  const net::ModelParams expected = net::init_params(c.config, 0);
  if (expected.size() != c.params.size())
    throw ConfigError("checkpoint: " + std::to_string(c.params.size()) + " parameter tensors, configuration implies " +
                      std::to_string(expected.size()));
  for (std::size_t k = 0; k < expected.size(); ++k) {
    const auto& want = expected.entries()[k];
    const auto& got = c.params.entries()[k];
    if (want.name != got.name || !want.value.same_shape(got.value))
      throw ConfigError("checkpoint: parameter " + got.name + " " + got.value.shape_string() + " does not match " +
                        want.name + " " + want.value.shape_string());
  }
  return c;
}

void save(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = encode(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace ise3::ckpt
