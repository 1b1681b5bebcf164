#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sond/error.hpp"
#include "sond/model.hpp"

namespace sond {
namespace {

// Layout, all integers little-endian:
//   u32 len, tag bytes ("sond-ckpt-v1")
//   u32 len, model config as key=value text
//   u32 tensor count, then per tensor: u32 len, name, u32 rows, u32 cols,
//   rows*cols IEEE-754 doubles in row-major order.

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFU));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelConfig& cfg, const Params& params) {
  std::string out;
  put_string(out, kCheckpointTag);
  put_string(out, cfg.to_kv().to_text());
  put_u32(out, static_cast<std::uint32_t>(params.tensors().size()));
  for (const auto& [name, t] : params.tensors()) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  const std::string tag = in.str();
  if (tag != kCheckpointTag) throw Error("unsupported checkpoint tag '" + tag + "'");
  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_kv(KeyValueConfig::parse_string(in.str()));
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.str();
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    Matrix t(rows, cols);
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = in.f64();
    ckpt.params.set(name, std::move(t));
  }
  if (!in.done()) throw Error("trailing bytes after checkpoint tensors");
  if (!ckpt.params.same_layout(init_params(ckpt.config, 0))) {
    throw Error("checkpoint tensors do not match its model config");
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Params& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(cfg, params);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace sond
