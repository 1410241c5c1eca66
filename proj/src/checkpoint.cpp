#include "dapo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dapo {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u64(out, s.size());
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated data");
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    std::size_t n = static_cast<std::size_t>(u64());
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

void put_doubles(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) put_f64(out, x);
}

std::vector<double> read_doubles(Reader& r) {
  std::size_t n = static_cast<std::size_t>(r.u64());
  r.need(8 * n);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = r.f64();
  return v;
}

// ---- SHA-256 (FIPS 180-4), no external dependency ----

constexpr std::uint32_t kSha256K[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
    0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
    0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
    0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
    0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
    0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
    0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
    0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

}  // namespace

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                        0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  std::vector<std::uint8_t> msg = bytes;
  std::uint64_t bit_len = static_cast<std::uint64_t>(bytes.size()) * 8;
  msg.push_back(0x80);
  while (msg.size() % 64 != 56) msg.push_back(0);
  for (int i = 7; i >= 0; --i)
    msg.push_back(static_cast<std::uint8_t>(bit_len >> (8 * i)));

  for (std::size_t off = 0; off < msg.size(); off += 64) {
    std::uint32_t w[64];
    for (int t = 0; t < 16; ++t)
      w[t] = (static_cast<std::uint32_t>(msg[off + 4 * t]) << 24) |
             (static_cast<std::uint32_t>(msg[off + 4 * t + 1]) << 16) |
             (static_cast<std::uint32_t>(msg[off + 4 * t + 2]) << 8) |
             msg[off + 4 * t + 3];
    for (int t = 16; t < 64; ++t) {
      std::uint32_t s0 = rotr(w[t - 15], 7) ^ rotr(w[t - 15], 18) ^ (w[t - 15] >> 3);
      std::uint32_t s1 = rotr(w[t - 2], 17) ^ rotr(w[t - 2], 19) ^ (w[t - 2] >> 10);
      w[t] = w[t - 16] + s0 + w[t - 7] + s1;
    }
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5],
                  g = h[6], hh = h[7];
    for (int t = 0; t < 64; ++t) {
      std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      std::uint32_t ch = (e & f) ^ (~e & g);
      std::uint32_t t1 = hh + s1 + ch + kSha256K[t] + w[t];
      std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      std::uint32_t t2 = s0 + maj;
      hh = g; g = f; f = e; e = d + t1;
      d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
  }

  static const char* hex = "0123456789abcdef";
  std::string out;
  for (std::uint32_t v : h)
    for (int i = 7; i >= 0; --i) out.push_back(hex[(v >> (4 * i)) & 0xF]);
  return out;
}

std::vector<std::uint8_t> tensor_bytes(
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, t] : tensors) {
    put_str(out, name);
    put_doubles(out, t.data());
  }
  return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out = {'D', 'A', 'P', 'O'};
  put_u32(out, static_cast<std::uint32_t>(ckpt.version));
  put_str(out, ckpt.config_json);

  put_u32(out, static_cast<std::uint32_t>(ckpt.vocab_tokens.size()));
  for (const auto& t : ckpt.vocab_tokens) put_str(out, t);

  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_str(out, name);
    put_u8(out, static_cast<std::uint8_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i)
      put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    put_doubles(out, t.data());
  }

  put_u32(out, static_cast<std::uint32_t>(ckpt.adam_m.size()));
  for (const auto& m : ckpt.adam_m) put_doubles(out, m);
  put_u32(out, static_cast<std::uint32_t>(ckpt.adam_v.size()));
  for (const auto& v : ckpt.adam_v) put_doubles(out, v);

  put_u64(out, static_cast<std::uint64_t>(ckpt.adam_steps));
  put_u32(out, static_cast<std::uint32_t>(ckpt.epoch));
  put_u64(out, static_cast<std::uint64_t>(ckpt.step));
  put_u64(out, ckpt.rng_state);
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), "DAPO", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  r.pos = 4;
  Checkpoint ckpt;
  ckpt.version = static_cast<int>(r.u32());
  if (ckpt.version != 1)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(ckpt.version));
  ckpt.config_json = r.str();

  std::uint32_t n_vocab = r.u32();
  ckpt.vocab_tokens.reserve(n_vocab);
  for (std::uint32_t i = 0; i < n_vocab; ++i) ckpt.vocab_tokens.push_back(r.str());

  std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    int ndim = r.u8();
    Shape shape(static_cast<std::size_t>(ndim));
    for (int d = 0; d < ndim; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(r.u32());
    std::vector<double> data = read_doubles(r);
    if (static_cast<int>(data.size()) != numel(shape))
      throw std::runtime_error("checkpoint: tensor '" + name + "' size mismatch");
    ckpt.tensors.emplace_back(name, Tensor(shape, std::move(data)));
  }

  std::uint32_t n_m = r.u32();
  for (std::uint32_t i = 0; i < n_m; ++i) ckpt.adam_m.push_back(read_doubles(r));
  std::uint32_t n_v = r.u32();
  for (std::uint32_t i = 0; i < n_v; ++i) ckpt.adam_v.push_back(read_doubles(r));

  ckpt.adam_steps = static_cast<long>(r.u64());
  ckpt.epoch = static_cast<int>(r.u32());
  ckpt.step = static_cast<long>(r.u64());
  ckpt.rng_state = r.u64();
  if (r.pos != bytes.size())
    throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<long>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace dapo
