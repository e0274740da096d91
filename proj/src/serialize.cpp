#include "shvit/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "shvit/rng.hpp"

namespace shvit {

static_assert(std::endian::native == std::endian::little,
              "weight container writes raw little-endian scalars");

namespace {

constexpr char kMagic[4] = {'S', 'H', 'V', 'W'};
constexpr std::uint64_t kMaxHeaderBytes = 1ull << 26;

struct ManifestEntry {
  std::string name;
  std::vector<int> shape;
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_len = 0;
};

nlohmann::json manifest_json(const std::vector<ManifestEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    arr.push_back({{"name", e.name},
                   {"shape", e.shape},
                   {"dtype", "f32"},
                   {"byte_offset", e.byte_offset},
                   {"byte_len", e.byte_len}});
  }
  return arr;
}

void write_file(const std::string& path, const std::string& header,
                const std::vector<const Tensor*>& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw SerializeError("cannot open '" + tmp + "' for writing");
    }
    out.write(kMagic, 4);
    const std::uint32_t version = kWeightFormatVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t header_len = header.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Tensor* t : tensors) {
      out.write(reinterpret_cast<const char*>(t->ptr()),
                static_cast<std::streamsize>(t->numel() * sizeof(float)));
    }
    if (!out) {
      std::remove(tmp.c_str());
      throw SerializeError("write failed for '" + tmp + "'");
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw SerializeError("cannot rename '" + tmp + "' to '" + path + "'");
  }
}

struct FileHeader {
  nlohmann::json header;
  std::uint64_t payload_start = 0;
};

FileHeader read_header(std::ifstream& in, const std::string& path) {
  char magic[4];
  if (!in.read(magic, 4)) {
    throw BadMagicError("'" + path + "' is shorter than the magic bytes");
  }
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw BadMagicError("'" + path + "' is not a weight container (bad magic)");
  }
  std::uint32_t version;
  std::uint64_t header_len;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version)) ||
      !in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len))) {
    throw TruncatedPayloadError("'" + path + "' ends inside the fixed header");
  }
  if (version != kWeightFormatVersion) {
    throw VersionMismatchError("'" + path + "' has format version " + std::to_string(version) +
                               ", expected " + std::to_string(kWeightFormatVersion));
  }
  if (header_len > kMaxHeaderBytes) {
    throw SerializeError("'" + path + "' declares an implausible header of " +
                         std::to_string(header_len) + " bytes");
  }
  std::string text(static_cast<std::size_t>(header_len), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw TruncatedPayloadError("'" + path + "' ends inside the JSON header");
  }
  FileHeader fh;
  try {
    fh.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SerializeError("'" + path + "' header is not valid JSON: " + e.what());
  }
  fh.payload_start = 4 + sizeof(version) + sizeof(header_len) + header_len;
  return fh;
}

std::vector<ManifestEntry> parse_manifest(const nlohmann::json& header, const std::string& path) {
  if (!header.contains("manifest") || !header["manifest"].is_array()) {
    throw ManifestMismatchError("'" + path + "' header has no tensor manifest");
  }
  std::vector<ManifestEntry> entries;
  std::uint64_t cursor = 0;
  for (const auto& j : header["manifest"]) {
    ManifestEntry e;
    try {
      e.name = j.at("name").get<std::string>();
      e.shape = j.at("shape").get<std::vector<int>>();
      e.byte_offset = j.at("byte_offset").get<std::uint64_t>();
      e.byte_len = j.at("byte_len").get<std::uint64_t>();
      if (j.at("dtype").get<std::string>() != "f32") {
        throw ManifestMismatchError("'" + path + "' tensor '" + e.name +
                                    "' has unsupported dtype");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ManifestMismatchError("'" + path + "' manifest entry is malformed: " + ex.what());
    }
    if (e.byte_offset != cursor) {
      throw ManifestMismatchError("'" + path + "' tensor '" + e.name +
                                  "' is not contiguous with the previous entry");
    }
    if (e.byte_len != shape_numel(e.shape) * sizeof(float)) {
      throw ManifestMismatchError("'" + path + "' tensor '" + e.name +
                                  "' byte length does not match its shape");
    }
    cursor += e.byte_len;
    entries.push_back(std::move(e));
  }
  return entries;
}

void read_payload(std::ifstream& in, const std::string& path,
                  const std::vector<std::pair<std::string, Tensor*>>& dst,
                  const std::vector<ManifestEntry>& entries) {
  if (entries.size() != dst.size()) {
    throw ManifestMismatchError("'" + path + "' holds " + std::to_string(entries.size()) +
                                " tensors, model expects " + std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, tensor] = dst[i];
    const auto& e = entries[i];
    if (e.name != name) {
      throw ManifestMismatchError("'" + path + "' tensor " + std::to_string(i) + " is '" +
                                  e.name + "', model expects '" + name + "'");
    }
    if (e.shape != tensor->shape) {
      throw ManifestMismatchError("'" + path + "' tensor '" + e.name + "' has shape " +
                                  shape_str(e.shape) + ", model expects " +
                                  shape_str(tensor->shape));
    }
    if (!in.read(reinterpret_cast<char*>(tensor->ptr()),
                 static_cast<std::streamsize>(e.byte_len))) {
      throw TruncatedPayloadError("'" + path + "' ends inside tensor '" + e.name + "'");
    }
  }
  char extra;
  if (in.read(&extra, 1)) {
    throw SerializeError("'" + path + "' has trailing bytes after the payload");
  }
}

// A fused file stores conv biases and no BN tensors, so the freshly built
// model must present the fused parameter layout before the manifest is
// matched. Only the flags and bias buffers change; nothing is folded.
void mark_fused(Model& model) {
  const auto mark = [](ConvBN<float>& cb) {
    cb.fused = true;
    if (!cb.conv.b.defined()) {
      cb.conv.b = Tensor::zeros({cb.conv.w.extent(0)}, true);
    }
  };
  const auto mark_block = [&mark](BlockT<float>& blk) {
    mark(blk.dw);
    mark(blk.ffn.expand);
    mark(blk.ffn.project);
  };
  for (auto& cb : model.stem) mark(cb);
  for (auto& stage : model.stages) {
    for (auto& blk : stage) mark_block(blk);
  }
  for (auto& ds : model.downsamples) {
    mark_block(ds.pre);
    mark(ds.expand);
    mark(ds.dw);
    mark(ds.project);
    mark_block(ds.post);
  }
  model.fused = true;
}

}  // namespace

void save_model(Model& model, const std::string& path) {
  const auto named = model.named_tensors();
  std::vector<ManifestEntry> entries;
  std::vector<const Tensor*> tensors;
  std::uint64_t cursor = 0;
  for (const auto& [name, tensor] : named) {
    ManifestEntry e;
    e.name = name;
    e.shape = tensor->shape;
    e.byte_offset = cursor;
    e.byte_len = tensor->numel() * sizeof(float);
    cursor += e.byte_len;
    entries.push_back(std::move(e));
    tensors.push_back(tensor);
  }
  nlohmann::json header;
  header["config"] = nlohmann::json::parse(model.cfg.to_json_text());
  header["fused"] = model.fused;
  header["manifest"] = manifest_json(entries);
  write_file(path, header.dump(), tensors);
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw SerializeError("cannot open '" + path + "' for reading");
  }
  FileHeader fh = read_header(in, path);
  if (!fh.header.contains("config")) {
    throw SerializeError("'" + path + "' header has no model config");
  }
  ModelConfig cfg = ModelConfig::from_json_text(fh.header["config"].dump());

  Rng rng(0);
  Model model = build_model<float>(cfg, rng);
  if (fh.header.value("fused", false)) {
    mark_fused(model);
  }
  read_payload(in, path, model.named_tensors(), parse_manifest(fh.header, path));
  return model;
}

void save_tensor(const Tensor& t, const std::string& name, const std::string& path) {
  if (!t.defined()) {
    throw std::invalid_argument("save_tensor: undefined tensor");
  }
  ManifestEntry e;
  e.name = name;
  e.shape = t.shape;
  e.byte_offset = 0;
  e.byte_len = t.numel() * sizeof(float);
  nlohmann::json header;
  header["manifest"] = manifest_json({e});
  write_file(path, header.dump(), {&t});
}

Tensor load_tensor(const std::string& path, std::string* name_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw SerializeError("cannot open '" + path + "' for reading");
  }
  FileHeader fh = read_header(in, path);
  const auto entries = parse_manifest(fh.header, path);
  if (entries.size() != 1) {
    throw ManifestMismatchError("'" + path + "' holds " + std::to_string(entries.size()) +
                                " tensors, expected exactly one");
  }
  Tensor t = Tensor::zeros(entries[0].shape);
  std::vector<std::pair<std::string, Tensor*>> dst{{entries[0].name, &t}};
  read_payload(in, path, dst, entries);
  if (name_out) *name_out = entries[0].name;
  return t;
}

}  // namespace shvit
