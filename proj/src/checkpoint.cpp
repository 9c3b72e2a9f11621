#include "skyrm/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace skyrm {

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::io: return "io error";
    case CheckpointErrorKind::bad_magic: return "bad magic";
    case CheckpointErrorKind::version_mismatch: return "version mismatch";
    case CheckpointErrorKind::truncated: return "truncated file";
    case CheckpointErrorKind::crc_mismatch: return "crc mismatch";
    case CheckpointErrorKind::shape_mismatch: return "shape mismatch";
    case CheckpointErrorKind::malformed: return "malformed checkpoint";
  }
  return "checkpoint error";
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& data() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(float* out, std::size_t count) {
    need(count * 4);
    std::memcpy(out, b_.data() + pos_, count * 4);
    pos_ += count * 4;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n)
      throw CheckpointError(CheckpointErrorKind::truncated,
                            "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

template <typename V>
std::string fmt_num(V v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename V>
V parse_num(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError(CheckpointErrorKind::malformed, "config record lacks '" + key + "'");
  V v{};
  const auto& s = it->second;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw CheckpointError(CheckpointErrorKind::malformed, "bad value for '" + key + "': " + s);
  return v;
}

std::string dims_text(const std::vector<std::uint32_t>& d) {
  std::string s = "(";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
  return s + ")";
}

struct StoredTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void check_layout(const std::vector<StoredTensor>& stored, const std::vector<ParamSpec>& layout) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t;
  for (const auto& spec : layout) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end())
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "tensor '" + spec.name + "' expected " + dims_text(spec.dims) + ", not present");
    if (it->second->dims != spec.dims)
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "tensor '" + spec.name + "' expected " + dims_text(spec.dims) + ", found " +
                                dims_text(it->second->dims));
  }
  if (stored.size() != layout.size()) {
    std::map<std::string, bool> known;
    for (const auto& spec : layout) known[spec.name] = true;
    for (const auto& t : stored)
      if (!known.count(t.name))
        throw CheckpointError(CheckpointErrorKind::shape_mismatch, "unexpected tensor '" + t.name + "'");
    throw CheckpointError(CheckpointErrorKind::shape_mismatch, "duplicate tensor names");
  }
}

UNetConfig parse_config(const std::map<std::string, std::string>& kv) {
  UNetConfig c;
  c.depth = parse_num<int>(kv, "model.depth");
  c.base_channels = parse_num<int>(kv, "model.base_channels");
  c.num_classes = parse_num<int>(kv, "model.num_classes");
  c.in_channels = parse_num<int>(kv, "model.in_channels");
  auto act = kv.find("model.activation");
  if (act == kv.end()) throw CheckpointError(CheckpointErrorKind::malformed, "config record lacks 'model.activation'");
  try {
    c.activation.kind = parse_activation(act->second);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, e.what());
  }
  c.activation.prelu_init = parse_num<float>(kv, "model.prelu_init");
  c.dropout_rate = parse_num<float>(kv, "model.dropout");
  c.input_h = parse_num<int>(kv, "model.input_h");
  c.input_w = parse_num<int>(kv, "model.input_w");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, e.what());
  }
  return c;
}

}  // namespace

std::string config_record(const UNetConfig& c, const TrainingMeta& meta) {
  std::ostringstream os;
  os << "model.depth=" << c.depth << "\n"
     << "model.base_channels=" << c.base_channels << "\n"
     << "model.num_classes=" << c.num_classes << "\n"
     << "model.in_channels=" << c.in_channels << "\n"
     << "model.activation=" << to_string(c.activation.kind) << "\n"
     << "model.prelu_init=" << fmt_num(c.activation.prelu_init) << "\n"
     << "model.dropout=" << fmt_num(c.dropout_rate) << "\n"
     << "model.input_h=" << c.input_h << "\n"
     << "model.input_w=" << c.input_w << "\n"
     << "meta.epoch=" << meta.epoch << "\n"
     << "meta.best_val_mcc=" << fmt_num(meta.best_val_mcc) << "\n"
     << "meta.seed=" << meta.seed << "\n";
  return os.str();
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(config_record(ckpt.config, ckpt.meta));
  auto views = param_views(ckpt.params, ckpt.config);
  w.u32(static_cast<std::uint32_t>(views.size()));
  for (const auto& v : views) {
    w.str(v.name);
    w.u32(static_cast<std::uint32_t>(v.dims.size()));
    for (auto d : v.dims) w.u32(d);
    w.bytes(v.values.data(), v.values.size() * sizeof(float));
  }
  const std::uint32_t crc = crc32_of(w.data());
  w.u32(crc);
  return std::move(w.data());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const UNetConfig* expected) {
  if (bytes.size() < 4) throw CheckpointError(CheckpointErrorKind::truncated, "file shorter than the magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(CheckpointErrorKind::bad_magic, "expected \"SKRM\"");
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::version_mismatch,
                          "file version " + std::to_string(version) + ", supported " +
                              std::to_string(kCheckpointVersion));
  const std::string record = r.str();
  const std::uint32_t count = r.u32();
  std::vector<StoredTensor> stored;
  for (std::uint32_t t = 0; t < count; ++t) {
    StoredTensor st;
    st.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(CheckpointErrorKind::malformed, "tensor '" + st.name + "' has rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      st.dims.push_back(r.u32());
      numel *= st.dims.back();
    }
    if (numel * 4 > r.remaining())
      throw CheckpointError(CheckpointErrorKind::truncated, "payload of tensor '" + st.name + "' is cut short");
    st.values.resize(numel);
    r.floats(st.values.data(), numel);
    stored.push_back(std::move(st));
  }
  const std::size_t body = 4 + r.pos();
  const std::uint32_t stored_crc = r.u32();
  if (r.remaining() != 0)
    throw CheckpointError(CheckpointErrorKind::malformed, std::to_string(r.remaining()) + " trailing bytes");
  if (crc32_of(bytes.first(body)) != stored_crc)
    throw CheckpointError(CheckpointErrorKind::crc_mismatch, "payload does not match its checksum");

  std::map<std::string, std::string> kv;
  std::istringstream is(record);
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(CheckpointErrorKind::malformed, "config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  Checkpoint ckpt;
  ckpt.config = parse_config(kv);
  ckpt.meta.epoch = parse_num<int>(kv, "meta.epoch");
  ckpt.meta.best_val_mcc = parse_num<double>(kv, "meta.best_val_mcc");
  ckpt.meta.seed = parse_num<std::uint64_t>(kv, "meta.seed");

  if (expected) check_layout(stored, param_layout(*expected));
  check_layout(stored, param_layout(ckpt.config));

  ckpt.params = init_params(ckpt.config, 0);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : stored) by_name[t.name] = &t;
  for (auto& v : param_views(ckpt.params, ckpt.config)) {
    const StoredTensor* st = by_name.at(v.name);
    std::copy(st->values.begin(), st->values.end(), v.values.begin());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes, expected);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.detail());
  }
}

}  // namespace skyrm
