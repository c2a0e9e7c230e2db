#include "cais/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cais {
namespace {

constexpr std::array<char, 4> kMagic = {'C', 'V', 'T', '1'};

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::string& buf, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[offset + i])) << (8 * i);
  return v;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path.string() + " for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw format_error("short write to " + path.string());
}

[[noreturn]] void fail_at(const std::filesystem::path& path, std::size_t offset, const std::string& what) {
  throw format_error(path.string() + ": " + what + " at byte offset " + std::to_string(offset));
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const tensor& t) {
  if (t.rank() == 0) throw shape_error("write_tensor: empty tensor");
  std::string buf(kMagic.begin(), kMagic.end());
  buf.reserve(8 + 4 * t.rank() + 4 * t.size());
  put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(buf, static_cast<std::uint32_t>(e));
  for (float v : t.data()) put_f32(buf, v);
  dump(path, buf);
}

tensor read_tensor(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  if (buf.size() < 4) fail_at(path, buf.size(), "truncated magic");
  if (std::memcmp(buf.data(), kMagic.data(), 4) != 0) fail_at(path, 0, "bad magic (expected CVT1)");
  if (buf.size() < 8) fail_at(path, buf.size(), "truncated rank");
  const std::uint32_t ndim = get_u32(buf, 4);
  if (ndim == 0) fail_at(path, 4, "rank 0");
  std::size_t offset = 8;
  shape_t shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    if (buf.size() < offset + 4) fail_at(path, buf.size(), "truncated extent list");
    const std::uint32_t e = get_u32(buf, offset);
    if (e == 0) fail_at(path, offset, "zero extent");
    shape.push_back(e);
    count *= e;
    offset += 4;
  }
  if (buf.size() < offset + 4 * count) fail_at(path, buf.size(), "truncated payload");
  if (buf.size() > offset + 4 * count) fail_at(path, offset + 4 * count, "trailing bytes");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i, offset += 4) {
    data[i] = std::bit_cast<float>(get_u32(buf, offset));
    if (!std::isfinite(data[i])) fail_at(path, offset, "non-finite value");
  }
  return tensor(std::move(shape), std::move(data));
}

void write_pfm(const std::filesystem::path& path, const tensor& map) {
  require_rank(map, 2, "write_pfm");
  const std::size_t h = map.extent(0), w = map.extent(1);
  std::string buf = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  for (std::size_t row = h; row-- > 0;) {
    for (std::size_t x = 0; x < w; ++x) put_f32(buf, map(row, x));
  }
  dump(path, buf);
}

tensor read_pfm(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  std::size_t pos = 0;
  // Header tokens are whitespace separated; the raster starts right after the
  // single whitespace byte that ends the scale token.
  auto next_token = [&](const char* what) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (start == pos) fail_at(path, start, std::string("missing ") + what);
    return std::pair{buf.substr(start, pos - start), start};
  };
  auto [magic, magic_at] = next_token("magic");
  if (magic == "PF") fail_at(path, magic_at, "unsupported color PFM (PF)");
  if (magic != "Pf") fail_at(path, magic_at, "bad PFM magic");
  auto parse_int = [&](const char* what) {
    auto [tok, at] = next_token(what);
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(tok, &used);
    } catch (const std::exception&) {
      fail_at(path, at, std::string("bad ") + what);
    }
    if (used != tok.size() || v <= 0) fail_at(path, at, std::string("bad ") + what);
    return static_cast<std::size_t>(v);
  };
  const std::size_t w = parse_int("width");
  const std::size_t h = parse_int("height");
  auto [scale_tok, scale_at] = next_token("scale");
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    fail_at(path, scale_at, "bad scale");
  }
  if (scale == 0.0) fail_at(path, scale_at, "zero scale");
  if (pos >= buf.size()) fail_at(path, pos, "truncated header");
  ++pos;
  const bool little = scale < 0.0;
  if (buf.size() < pos + 4 * w * h) fail_at(path, buf.size(), "truncated raster");
  tensor out({h, w});
  for (std::size_t row = h; row-- > 0;) {
    for (std::size_t x = 0; x < w; ++x, pos += 4) {
      std::uint32_t bits = get_u32(buf, pos);
      if (!little) bits = __builtin_bswap32(bits);
      const float v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) fail_at(path, pos, "non-finite value");
      out(row, x) = v;
    }
  }
  return out;
}

}  // namespace cais
