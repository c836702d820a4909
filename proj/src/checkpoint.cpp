#include "tlid/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include "json.hpp"

#include "tlid/error.hpp"

namespace tlid {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'T', 'L', 'I', 'D'};

json config_json(const ModelConfig& c) {
  return json{{"num_blocks", c.num_blocks},
              {"repeats", c.repeats},
              {"channels", c.channels},
              {"mega_kernel_sizes", c.mega_kernel_sizes},
              {"prologue_kernel", c.prologue_kernel},
              {"prologue_channels", c.prologue_channels},
              {"epilogue_kernel", c.epilogue_kernel},
              {"epilogue_channels", c.epilogue_channels},
              {"se_reduction", c.se_reduction},
              {"dropout_p", c.dropout_p},
              {"decoder_dropout_p", c.decoder_dropout_p},
              {"hidden_dim", c.hidden_dim},
              {"num_classes", c.num_classes},
              {"n_mels", c.n_mels}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.num_blocks = j.at("num_blocks").get<int>();
  c.repeats = j.at("repeats").get<int>();
  c.channels = j.at("channels").get<int>();
  c.mega_kernel_sizes = j.at("mega_kernel_sizes").get<std::vector<int>>();
  c.prologue_kernel = j.at("prologue_kernel").get<int>();
  c.prologue_channels = j.at("prologue_channels").get<int>();
  c.epilogue_kernel = j.at("epilogue_kernel").get<int>();
  c.epilogue_channels = j.at("epilogue_channels").get<int>();
  c.se_reduction = j.at("se_reduction").get<int>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.decoder_dropout_p = j.at("decoder_dropout_p").get<double>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.n_mels = j.at("n_mels").get<int>();
  return c;
}

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& dst, std::size_t n, const char* what) {
    if (n > (bytes_.size() - pos_) / 4) need(n * 4, what);
    dst.resize(n);
    std::memcpy(dst.data(), bytes_.data() + pos_, n * 4);
    pos_ += n * 4;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

TensorRecord record(const std::string& name, const Shape& shape, std::span<const double> values) {
  TensorRecord r{name, shape, {}};
  r.values.reserve(values.size());
  for (double v : values) r.values.push_back(static_cast<float>(v));
  return r;
}

void write_record(Writer& w, const TensorRecord& r) {
  w.u32(static_cast<std::uint32_t>(r.name.size()));
  w.raw(r.name.data(), r.name.size());
  w.u32(static_cast<std::uint32_t>(r.shape.size()));
  for (auto d : r.shape) w.u32(static_cast<std::uint32_t>(d));
  w.raw(r.values.data(), r.values.size() * sizeof(float));
}

TensorRecord read_record(Reader& r) {
  TensorRecord rec;
  const auto name_len = r.u32("tensor name length");
  rec.name = r.str(name_len, "tensor name");
  const auto rank = r.u32("tensor rank");
  if (rank > 8) throw FormatError("checkpoint: implausible rank for tensor '" + rec.name + "'");
  for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.u32("tensor dims"));
  r.floats(rec.values, numel(rec.shape), "tensor data");
  return rec;
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  constexpr std::size_t kChunk = 1u << 30;
  while (n > 0) {
    const std::size_t step = std::min(n, kChunk);
    crc = crc32(crc, data, static_cast<uInt>(step));
    data += step;
    n -= step;
  }
  return static_cast<std::uint32_t>(crc);
}

void check_record(const TensorRecord& rec, const std::string& name, const Shape& shape) {
  if (rec.name != name) {
    throw ShapeMismatchError("checkpoint tensor '" + rec.name + "' does not match model tensor '" + name + "'");
  }
  if (rec.shape != shape) {
    throw ShapeMismatchError("shape mismatch for tensor '" + name + "': checkpoint " + shape_str(rec.shape) +
                             " vs model " + shape_str(shape));
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config document: ") + e.what());
  }
}

Checkpoint make_checkpoint(const Model& model, std::vector<std::string> labels, CheckpointMetrics metrics) {
  Checkpoint c;
  c.model_config = model.config();
  c.label_set = std::move(labels);
  c.metrics = metrics;
  for (const auto& p : model.parameters()) c.params.push_back(record(p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& b : model.buffers()) c.buffers.push_back(record(b.name, {b.values.size()}, b.values));
  return c;
}

void load_into(Model& model, const Checkpoint& ckpt) {
  auto& params = model.parameters();
  auto& buffers = model.buffers();
  if (ckpt.params.size() != params.size() || ckpt.buffers.size() != buffers.size()) {
    throw ShapeMismatchError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters and " +
                             std::to_string(ckpt.buffers.size()) + " buffers; model expects " +
                             std::to_string(params.size()) + " and " + std::to_string(buffers.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    check_record(ckpt.params[i], params[i].name, params[i].tensor.shape());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    check_record(ckpt.buffers[i], buffers[i].name, {buffers[i].values.size()});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    std::copy(ckpt.params[i].values.begin(), ckpt.params[i].values.end(), dst.begin());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    std::copy(ckpt.buffers[i].values.begin(), ckpt.buffers[i].values.end(), buffers[i].values.begin());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (static_cast<std::size_t>(ckpt.model_config.num_classes) != ckpt.label_set.size()) {
    throw ShapeMismatchError("checkpoint label set size does not match num_classes");
  }
  Model m = Model::build(ckpt.model_config, 0);
  load_into(m, ckpt);
  return m;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json doc{{"model_config", config_json(ckpt.model_config)},
           {"labels", ckpt.label_set},
           {"metrics", {{"epoch", ckpt.metrics.epoch}, {"val_macro_acc", ckpt.metrics.val_macro_acc}}},
           {"num_params", ckpt.params.size()},
           {"num_buffers", ckpt.buffers.size()}};
  const std::string text = doc.dump();
  Writer w;
  w.raw(kMagic, 4);
  w.u32(ckpt.format_version);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& r : ckpt.params) write_record(w, r);
  for (const auto& r : ckpt.buffers) write_record(w, r);
  w.u32(crc_of(w.out.data() + 8, w.out.size() - 8));
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic bytes (expected TLID)");
  Reader r(bytes, 4);
  Checkpoint c;
  c.format_version = r.u32("version");
  if (c.format_version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(c.format_version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.data() + 8, bytes.size() - 12) != stored_crc) {
    throw FormatError("checkpoint: CRC mismatch (file corrupted or truncated)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader br(body, 8);
  const auto doc_len = br.u32("document length");
  json doc;
  try {
    doc = json::parse(br.str(doc_len, "document"));
    c.model_config = config_from(doc.at("model_config"));
    c.label_set = doc.at("labels").get<std::vector<std::string>>();
    c.metrics.epoch = doc.at("metrics").at("epoch").get<int>();
    c.metrics.val_macro_acc = doc.at("metrics").at("val_macro_acc").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint document: ") + e.what());
  }
  const auto np = doc.at("num_params").get<std::size_t>();
  const auto nb = doc.at("num_buffers").get<std::size_t>();
  for (std::size_t i = 0; i < np; ++i) c.params.push_back(read_record(br));
  for (std::size_t i = 0; i < nb; ++i) c.buffers.push_back(read_record(br));
  if (br.pos() != body.size()) throw FormatError("checkpoint: trailing bytes after tensor records");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace tlid
