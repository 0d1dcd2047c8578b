#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "memlab/error.hpp"
#include "memlab/model.hpp"

namespace memlab {
namespace {

constexpr std::uint8_t kMagic[4] = {'M', 'L', 'A', 'B'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t get(int width) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size()) throw InputError("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw InputError("checkpoint truncated");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Parameters& params) {
  const ModelConfig& c = params.config();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  for (std::size_t dim : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.vocab_size, c.max_seq_len})
    put_u32(out, static_cast<std::uint32_t>(dim));
  put_u64(out, c.seed);
  const auto flat = params.flat();
  put_u64(out, flat.size());
  out.reserve(out.size() + flat.size() * 8);
  for (double v : flat) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Parameters deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw InputError("not a checkpoint (bad magic bytes)");
  const auto version = static_cast<std::uint32_t>(r.get(4));
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = r.get(4);
  c.n_heads = r.get(4);
  c.d_model = r.get(4);
  c.d_head = r.get(4);
  c.d_mlp = r.get(4);
  c.vocab_size = r.get(4);
  c.max_seq_len = r.get(4);
  c.seed = r.get(8);
  Parameters params(c);
  const std::uint64_t count = r.get(8);
  if (count != params.flat().size())
    throw InputError("checkpoint value count does not match its config block");
  if (r.remaining() != count * 8) throw InputError("checkpoint has trailing or missing bytes");
  for (double& v : params.flat()) v = std::bit_cast<double>(r.get(8));
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const Parameters& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Parameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("missing checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace memlab
