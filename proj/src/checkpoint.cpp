#include "cdpm/checkpoint.hpp"

#include <cstring>

#include "cdpm/config.hpp"
#include "cdpm/io.hpp"

namespace cdpm {

namespace {
constexpr char kMagic[4] = {'C', 'D', 'P', 'M'};
}

std::vector<unsigned char> encode_checkpoint(const ModelMeta& meta, const DenoiserParams& params) {
  if (!(meta.denoiser == params.config()))
    throw std::invalid_argument("encode_checkpoint: meta and parameter configs differ");
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string text = to_json(meta).dump();
  w.u64(text.size());
  w.str(text);
  w.u64(params.tensors().size());
  for (const auto& t : params.tensors()) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic (expected CDPM)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t text_len = r.u64();
  if (text_len > r.remaining()) throw FormatError("truncated payload");
  Checkpoint ck;
  try {
    ck.meta = model_meta_from_json(Json::parse(r.str(text_len)));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid config block: ") + e.what());
  }
  const std::uint64_t n = r.u64();
  std::vector<ParamTensor> tensors;
  for (std::uint64_t i = 0; i < n; ++i) {
    ParamTensor t;
    const std::uint32_t name_len = r.u32();
    t.name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    const std::size_t count = nn::numel(t.shape);
    if (count > r.remaining() / 4) throw FormatError("truncated payload");
    t.data.resize(count);
    for (double& v : t.data) v = r.f32();
    tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload");

  const auto layout = parameter_layout(ck.meta.denoiser);
  if (layout.size() != tensors.size())
    throw FormatError("tensor count does not match the stored architecture");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].first != tensors[i].name || layout[i].second != tensors[i].shape)
      throw FormatError("tensor '" + tensors[i].name + "' does not match the stored architecture");
  ck.params = DenoiserParams(ck.meta.denoiser, std::move(tensors));
  if (!ck.params.all_finite()) throw FormatError("non-finite parameter");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelMeta& meta,
                     const DenoiserParams& params) {
  write_file_atomic(path, encode_checkpoint(meta, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

DenoiserParams round_to_storage(const DenoiserParams& params) {
  DenoiserParams out = params;
  for (auto& t : out.tensors())
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace cdpm
