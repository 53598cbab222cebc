#include "nestnet/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "nestnet/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "the model container writer assumes a little-endian host");

namespace nestnet {

namespace {

constexpr char kMagic[8] = {'N', 'N', 'E', 'T', 'M', 'O', 'D', 'L'};
constexpr uint32_t kVersion = 1;

struct Writer {
  std::vector<uint8_t> buf;

  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <class T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  void tensor(const std::string& name, const Tensor<float>& t) {
    if (name.size() > 0xFFFF) throw DataError("save: tensor name too long");
    pod<uint16_t>(static_cast<uint16_t>(name.size()));
    bytes(name.data(), name.size());
    pod<uint8_t>(0);  // dtype float32
    pod<uint8_t>(static_cast<uint8_t>(t.ndim()));
    for (int d : t.shape) pod<uint32_t>(static_cast<uint32_t>(d));
    bytes(t.data.data(), t.data.size() * sizeof(float));
  }
};

void finish(Writer& w, const std::string& path, const std::string& sidecar_json) {
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(w.buf.data()), static_cast<uInt>(w.buf.size())));
  w.pod<uint32_t>(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw DataError("save: write failed for '" + path + "'");
  out.close();
  std::ofstream side(path + ".json", std::ios::trunc);
  if (!side) throw DataError("save: cannot write sidecar '" + path + ".json'");
  side << sidecar_json << "\n";
}

struct Reader {
  std::vector<uint8_t> buf;
  size_t pos = 0;
  std::string path;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size())
      throw DataError("load: truncated container '" + path + "': need " + std::to_string(n) +
                      " bytes for " + what + ", only " + std::to_string(buf.size() - pos) +
                      " remain");
  }
  void bytes(void* p, size_t n, const char* what) {
    need(n, what);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <class T>
  T pod(const char* what) {
    T v;
    bytes(&v, sizeof(T), what);
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

Reader open_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load: cannot open '" + path + "'");
  Reader r;
  r.path = path;
  r.buf.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (r.buf.size() < sizeof(kMagic) + 2 * sizeof(uint32_t) + sizeof(uint32_t))
    throw DataError("load: truncated container '" + path + "': only " +
                    std::to_string(r.buf.size()) + " bytes");
  if (std::memcmp(r.buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw DataError("load: '" + path + "' is not a model container (bad magic)");
  // Checksum covers everything before the trailing 4 bytes.
  const size_t body = r.buf.size() - sizeof(uint32_t);
  uint32_t stored;
  std::memcpy(&stored, r.buf.data() + body, sizeof(stored));
  const uint32_t computed = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(r.buf.data()), static_cast<uInt>(body)));
  if (stored != computed)
    throw DataError("load: checksum mismatch in '" + path + "': stored " +
                    std::to_string(stored) + ", computed " + std::to_string(computed) +
                    " (file corrupted)");
  r.buf.resize(body);  // the trailing checksum is not part of the payload
  r.pos = sizeof(kMagic);
  const uint32_t version = r.pod<uint32_t>("version");
  if (version != kVersion)
    throw DataError("load: '" + path + "' has unsupported container version " +
                    std::to_string(version) + " (supported: " + std::to_string(kVersion) + ")");
  return r;
}

struct TensorRecord {
  std::string name;
  Tensor<float> value;
};

TensorRecord read_tensor(Reader& r) {
  TensorRecord rec;
  const uint16_t name_len = r.pod<uint16_t>("tensor name length");
  rec.name = r.str(name_len, "tensor name");
  const uint8_t dtype = r.pod<uint8_t>("tensor dtype");
  if (dtype != 0)
    throw DataError("load: '" + r.path + "' tensor '" + rec.name + "' has unsupported dtype " +
                    std::to_string(dtype));
  const uint8_t ndim = r.pod<uint8_t>("tensor rank");
  std::vector<int> shape(ndim);
  size_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    const uint32_t d = r.pod<uint32_t>("tensor dim");
    if (d == 0 || d > 1u << 28)
      throw DataError("load: '" + r.path + "' tensor '" + rec.name + "' has invalid dim " +
                      std::to_string(d));
    shape[i] = static_cast<int>(d);
    numel *= d;
  }
  rec.value.shape = std::move(shape);
  rec.value.data.resize(numel);
  r.bytes(rec.value.data.data(), numel * sizeof(float), "tensor payload");
  return rec;
}

nlohmann::json meta_json(const ArchDescriptor& desc) {
  return nlohmann::json::parse(desc.to_json());
}

// Applies the file's tensor records onto a skeleton's named tensors,
// demanding an exact one-to-one match of names and shapes.
void fill_tensors(Reader& r, uint32_t count,
                  std::vector<std::pair<std::string, Tensor<float>*>>& slots) {
  if (count != slots.size())
    throw DataError("load: '" + r.path + "' holds " + std::to_string(count) +
                    " tensors, model skeleton expects " + std::to_string(slots.size()));
  for (uint32_t i = 0; i < count; ++i) {
    TensorRecord rec = read_tensor(r);
    auto& [name, slot] = slots[i];
    if (rec.name != name)
      throw DataError("load: '" + r.path + "' tensor " + std::to_string(i) + " is '" + rec.name +
                      "', expected '" + name + "'");
    if (rec.value.shape != slot->shape)
      throw DataError("load: '" + r.path + "' tensor '" + rec.name + "' has shape " +
                      shape_str(rec.value.shape) + ", expected " + shape_str(slot->shape));
    *slot = std::move(rec.value);
  }
  if (r.pos != r.buf.size())
    throw DataError("load: '" + r.path + "' has " + std::to_string(r.buf.size() - r.pos) +
                    " unexpected trailing bytes");
}

std::vector<std::pair<std::string, Tensor<float>*>> full_model_slots(NestedModel<float>& m) {
  std::vector<std::pair<std::string, Tensor<float>*>> slots;
  m.visit_params([&](const std::string& n, Tensor<float>& v, Tensor<float>&,
                     const Tensor<uint8_t>*) { slots.emplace_back(n, &v); });
  m.visit_buffers([&](const std::string& n, Tensor<float>& v) { slots.emplace_back(n, &v); });
  return slots;
}

std::vector<std::pair<std::string, Tensor<float>*>> sliced_model_slots(SlicedModel<float>& m) {
  std::vector<std::pair<std::string, Tensor<float>*>> slots;
  auto bn = [&](const std::string& p, SlicedBN<float>& b) {
    slots.emplace_back(p + ".gamma", &b.gamma);
    slots.emplace_back(p + ".beta", &b.beta);
    slots.emplace_back(p + ".running_mean", &b.mean);
    slots.emplace_back(p + ".running_var", &b.var);
  };
  slots.emplace_back("stem.conv.w", &m.stem_conv.weights);
  bn("stem.bn", m.stem_bn);
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    slots.emplace_back(p + ".conv1.w", &m.blocks[i].conv1.weights);
    bn(p + ".bn1", m.blocks[i].bn1);
    slots.emplace_back(p + ".conv2.w", &m.blocks[i].conv2.weights);
    bn(p + ".bn2", m.blocks[i].bn2);
    if (m.blocks[i].has_proj) slots.emplace_back(p + ".proj.w", &m.blocks[i].proj.weights);
  }
  slots.emplace_back("head.w", &m.head_w);
  slots.emplace_back("head.b", &m.head_b);
  return slots;
}

}  // namespace

void save_model(NestedModel<float>& model, const std::string& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kVersion);
  w.pod<uint32_t>(static_cast<uint32_t>(kModelKindFull));
  nlohmann::json meta;
  meta["arch"] = meta_json(model.desc);
  meta["kind"] = "full";
  meta["frozen"] = model.frozen;
  const std::string meta_s = meta.dump();
  w.pod<uint64_t>(meta_s.size());
  w.bytes(meta_s.data(), meta_s.size());

  auto slots = full_model_slots(model);
  w.pod<uint32_t>(static_cast<uint32_t>(slots.size()));
  for (auto& [name, t] : slots) w.tensor(name, *t);
  finish(w, path, meta.dump(2));
}

void save_model(const SlicedModel<float>& model, const std::string& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kVersion);
  w.pod<uint32_t>(static_cast<uint32_t>(kModelKindSliced));
  nlohmann::json meta;
  meta["arch"] = meta_json(model.arch);
  meta["kind"] = "sliced";
  meta["d"] = model.id.d;
  meta["w"] = model.id.w;
  const std::string meta_s = meta.dump();
  w.pod<uint64_t>(meta_s.size());
  w.bytes(meta_s.data(), meta_s.size());

  auto slots = sliced_model_slots(const_cast<SlicedModel<float>&>(model));
  w.pod<uint32_t>(static_cast<uint32_t>(slots.size()));
  for (auto& [name, t] : slots) w.tensor(name, *t);
  finish(w, path, meta.dump(2));
}

namespace {

struct Header {
  uint32_t kind;
  nlohmann::json meta;
  uint32_t tensor_count;
};

Header read_header(Reader& r) {
  Header h;
  h.kind = r.pod<uint32_t>("model kind");
  if (h.kind != kModelKindFull && h.kind != kModelKindSliced)
    throw DataError("load: '" + r.path + "' has unknown model kind " + std::to_string(h.kind));
  const uint64_t meta_len = r.pod<uint64_t>("metadata length");
  const std::string meta_s = r.str(meta_len, "metadata");
  try {
    h.meta = nlohmann::json::parse(meta_s);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load: '" + r.path + "' has invalid metadata JSON: " + e.what());
  }
  h.tensor_count = r.pod<uint32_t>("tensor count");
  return h;
}

}  // namespace

int peek_model_kind(const std::string& path) {
  Reader r = open_container(path);
  return static_cast<int>(read_header(r).kind);
}

NestedModel<float> load_full_model(const std::string& path) {
  Reader r = open_container(path);
  Header h = read_header(r);
  if (h.kind != kModelKindFull)
    throw DataError("load: '" + path + "' holds a sliced model; expected a full model");
  ArchDescriptor desc = ArchDescriptor::from_json(h.meta.at("arch").dump());
  NestedModel<float> model = build_model<float>(desc);
  model.frozen = h.meta.value("frozen", false);
  auto slots = full_model_slots(model);
  fill_tensors(r, h.tensor_count, slots);
  return model;
}

SlicedModel<float> load_sliced_model(const std::string& path) {
  Reader r = open_container(path);
  Header h = read_header(r);
  if (h.kind != kModelKindSliced)
    throw DataError("load: '" + path + "' holds a full model; expected a sliced model");
  ArchDescriptor desc = ArchDescriptor::from_json(h.meta.at("arch").dump());
  SliceId id;
  try {
    id.d = h.meta.at("d").get<int>();
    id.w = h.meta.at("w").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load: '" + path + "' metadata lacks slice coordinates: " + e.what());
  }
  SlicedModel<float> model = sliced_skeleton<float>(desc, id);
  auto slots = sliced_model_slots(model);
  fill_tensors(r, h.tensor_count, slots);
  return model;
}

}  // namespace nestnet
