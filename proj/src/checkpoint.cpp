#include "vqprompt/checkpoint.hpp"

#include "binary_io.hpp"

namespace vqp {

namespace {
constexpr std::string_view kCheckpointMagic = "VQPC";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

const CheckpointBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.name == name) return &b;
  return nullptr;
}

void Checkpoint::put(const std::string& name, const Tensor& t) {
  for (auto& b : blobs) {
    if (b.name == name) {
      b.shape = t.shape();
      b.value = t.value();
      return;
    }
  }
  blobs.push_back({name, t.shape(), t.value()});
}

Checkpoint make_checkpoint(const Backbone& backbone) {
  Checkpoint ckpt;
  ckpt.config = backbone.config();
  ckpt.frozen = backbone.frozen();
  for (const auto& nt : backbone.parameters()) ckpt.put(nt.name, nt.tensor);
  return ckpt;
}

Backbone backbone_from_checkpoint(const Checkpoint& ckpt) {
  std::map<std::string, Matrix> values;
  for (const auto& b : ckpt.blobs) values.emplace(b.name, b.value);
  return load_backbone_parameters(ckpt.config, ckpt.frozen, values);
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const auto& c = ckpt.config;
  for (int v : {c.depth, c.dim, c.heads, c.seq_len, c.ff_dim, c.token_dim}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(c.prompt_blocks.size()));
  for (int b : c.prompt_blocks) w.u32(static_cast<std::uint32_t>(b));
  w.u8(ckpt.frozen ? 1 : 0);
  w.u32(ckpt.pool_size);
  w.u32(ckpt.prompt_length);
  w.u32(static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (Index d : b.shape) w.u64(static_cast<std::uint64_t>(d));
    for (Index i = 0; i < b.value.size(); ++i) w.f64(b.value.data()[i]);
  }
  w.save(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kCheckpointMagic);
  const auto version_at = r.offset();
  if (r.u32("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  Checkpoint ckpt;
  auto& c = ckpt.config;
  c.depth = static_cast<int>(r.u32("depth"));
  c.dim = static_cast<int>(r.u32("dim"));
  c.heads = static_cast<int>(r.u32("heads"));
  c.seq_len = static_cast<int>(r.u32("seq_len"));
  c.ff_dim = static_cast<int>(r.u32("ff_dim"));
  c.token_dim = static_cast<int>(r.u32("token_dim"));
  const auto n_blocks = r.u32("prompt block count");
  if (n_blocks > static_cast<std::uint32_t>(c.depth)) throw FormatError("too many prompt blocks", r.offset());
  for (std::uint32_t i = 0; i < n_blocks; ++i) c.prompt_blocks.push_back(static_cast<int>(r.u32("prompt block")));
  const auto config_end = r.offset();
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("invalid backbone config: ") + e.what(), config_end);
  }
  ckpt.frozen = r.u8("frozen flag") != 0;
  ckpt.pool_size = r.u32("pool size");
  ckpt.prompt_length = r.u32("prompt length");
  const auto n_blobs = r.u32("blob count");
  for (std::uint32_t i = 0; i < n_blobs; ++i) {
    CheckpointBlob b;
    b.name = r.str("blob name");
    const auto rank = r.u32("blob rank");
    if (rank > 8) throw FormatError("blob '" + b.name + "' has implausible rank", r.offset());
    Index rows = 1, cols = 1;
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(static_cast<Index>(r.u64("blob dim")));
    if (rank == 1) {
      cols = b.shape[0];
    } else if (rank >= 2) {
      cols = b.shape.back();
      for (std::uint32_t k = 0; k + 1 < rank; ++k) rows *= b.shape[k];
    }
    r.need(static_cast<std::uint64_t>(rows * cols) * 8, "blob values");
    b.value.resize(rows, cols);
    for (Index k = 0; k < b.value.size(); ++k) b.value.data()[k] = r.f64("blob value");
    ckpt.blobs.push_back(std::move(b));
  }
  r.expect_end();
  return ckpt;
}

}  // namespace vqp
