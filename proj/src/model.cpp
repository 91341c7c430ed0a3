#include "winvit/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "winvit/errors.hpp"

namespace winvit::model {

namespace {

constexpr char kCheckpointMagic[5] = {'W', 'M', 'H', 'V', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kNoBlock = 0xFFFFFFFFu;

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
    auto v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    auto v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
  }
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng, DType dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound, dtype);
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated");
  return value;
}

std::string section_label(const std::string& tag, int block) {
  std::string s = "'" + tag + "'";
  if (block >= 0) s += " (block " + std::to_string(block) + ")";
  return s;
}

// Consecutive parameters sharing (section, block) form one serialized section.
struct SectionGroup {
  std::string tag;
  int block;
  std::vector<ParamRef> params;
};

std::vector<SectionGroup> group_sections(std::vector<ParamRef> refs) {
  std::vector<SectionGroup> groups;
  for (auto& r : refs) {
    if (groups.empty() || groups.back().tag != r.section || groups.back().block != r.block) {
      groups.push_back(SectionGroup{r.section, r.block, {}});
    }
    groups.back().params.push_back(r);
  }
  return groups;
}

}  // namespace

std::string to_string(AttentionVariant variant) { return variant == AttentionVariant::Windowed ? "windowed" : "global"; }

AttentionVariant attention_variant_from_string(const std::string& name) {
  if (name == "windowed") return AttentionVariant::Windowed;
  if (name == "global") return AttentionVariant::Global;
  throw ConfigError("unknown attention variant '" + name + "' (expected windowed|global)");
}

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size=" + std::to_string(image_size) + " is not divisible by patch_size=" +
                      std::to_string(patch_size));
  }
  if (window == 0 || grid() % window != 0) {
    throw GeometryError("token grid " + std::to_string(grid()) + "x" + std::to_string(grid()) +
                        " (H=" + std::to_string(grid()) + ", W=" + std::to_string(grid()) +
                        ") is not divisible by window M=" + std::to_string(window));
  }
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim=" + std::to_string(embed_dim) + " is not divisible by heads=" + std::to_string(heads));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout must lie in [0,1), got " + format_double(dropout_rate));
  }
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "image_size=" << image_size << "\n"
     << "patch_size=" << patch_size << "\n"
     << "embed_dim=" << embed_dim << "\n"
     << "depth=" << depth << "\n"
     << "heads=" << heads << "\n"
     << "window=" << window << "\n"
     << "mlp_ratio=" << mlp_ratio << "\n"
     << "num_classes=" << num_classes << "\n"
     << "dropout=" << format_double(dropout_rate) << "\n"
     << "sharing=" << attention::to_string(sharing) << "\n"
     << "attention=" << to_string(attention) << "\n"
     << "seed=" << seed << "\n"
     << "precision=" << (dtype == DType::F32 ? "f32" : "f64") << "\n";
  return os.str();
}

bool ModelConfig::is_key(const std::string& key) {
  static const char* kKeys[] = {"image_size", "patch_size", "embed_dim", "depth",    "heads",     "window",
                                "mlp_ratio",  "num_classes", "dropout",  "sharing", "attention", "seed",
                                "precision"};
  return std::find(std::begin(kKeys), std::end(kKeys), key) != std::end(kKeys);
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "image_size") image_size = parse_size(key, value);
  else if (key == "patch_size") patch_size = parse_size(key, value);
  else if (key == "embed_dim") embed_dim = parse_size(key, value);
  else if (key == "depth") depth = parse_size(key, value);
  else if (key == "heads") heads = parse_size(key, value);
  else if (key == "window") window = parse_size(key, value);
  else if (key == "mlp_ratio") mlp_ratio = parse_size(key, value);
  else if (key == "num_classes") num_classes = parse_size(key, value);
  else if (key == "dropout") dropout_rate = parse_real(key, value);
  else if (key == "sharing") sharing = attention::sharing_mode_from_string(value);
  else if (key == "attention") attention = attention_variant_from_string(value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "precision") {
    if (value == "f32") dtype = DType::F32;
    else if (value == "f64") dtype = DType::F64;
    else throw ConfigError("precision must be f32 or f64, got '" + value + "'");
  } else {
    throw ConfigError("unknown model config key '" + key + "'");
  }
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed config line '" + line + "'");
    c.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

Model Model::init(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  Rng rng(config.seed);
  const std::size_t c = config.embed_dim, hidden = config.hidden();
  const DType dt = config.dtype;
  m.patch_w = trunc_normal({config.patch_dim(), c}, rng, 0.02, dt);
  m.patch_b = Tensor::zeros({c}, dt);
  for (std::size_t i = 0; i < config.depth; ++i) {
    BlockParams b;
    b.ln1_gamma = Tensor::full({c}, 1.0, dt);
    b.ln1_beta = Tensor::zeros({c}, dt);
    b.attn = attention::ProjectionParams::init(c, config.heads, config.sharing, config.dropout_rate, rng, dt);
    if (config.attention == AttentionVariant::Windowed) {
      b.bias_index = attention::build_bias_index(config.window);
      b.bias_table = Tensor::zeros({config.heads, b.bias_index.table_size()}, dt);
    }
    b.ln2_gamma = Tensor::full({c}, 1.0, dt);
    b.ln2_beta = Tensor::zeros({c}, dt);
    b.fc1_w = trunc_normal({c, hidden}, rng, 0.02, dt);
    b.fc1_b = Tensor::zeros({hidden}, dt);
    b.dw_w = fan_in_uniform({hidden, 1, 3, 3}, 9, rng, dt);
    b.dw_b = Tensor::zeros({hidden}, dt);
    b.sam = sam::SamParams::init(rng, dt);
    b.fc2_w = trunc_normal({hidden, c}, rng, 0.02, dt);
    b.fc2_b = Tensor::zeros({c}, dt);
    m.blocks.push_back(std::move(b));
  }
  m.head_w = trunc_normal({c, config.num_classes}, rng, 0.02, dt);
  m.head_b = Tensor::zeros({config.num_classes}, dt);
  return m;
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> refs;
  refs.push_back({kSectionStem, -1, "patch_w", &patch_w});
  refs.push_back({kSectionStem, -1, "patch_b", &patch_b});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const int bi = static_cast<int>(i);
    refs.push_back({kSectionAttention, bi, "ln1_gamma", &b.ln1_gamma});
    refs.push_back({kSectionAttention, bi, "ln1_beta", &b.ln1_beta});
    refs.push_back({kSectionAttention, bi, "w_q", &b.attn.w_q});
    if (b.attn.w_k) refs.push_back({kSectionAttention, bi, "w_k", &*b.attn.w_k});
    refs.push_back({kSectionAttention, bi, "w_v", &b.attn.w_v});
    refs.push_back({kSectionAttention, bi, "w_o", &b.attn.w_o});
    refs.push_back({kSectionAttention, bi, "b_q", &b.attn.b_q});
    refs.push_back({kSectionAttention, bi, "b_k", &b.attn.b_k});
    refs.push_back({kSectionAttention, bi, "b_v", &b.attn.b_v});
    refs.push_back({kSectionAttention, bi, "b_o", &b.attn.b_o});
    if (b.bias_table) refs.push_back({kSectionAttention, bi, "bias_table", &*b.bias_table});
    refs.push_back({kSectionSam, bi, "kernel", &b.sam.kernel});
    refs.push_back({kSectionSam, bi, "bias", &b.sam.bias});
    refs.push_back({kSectionFfn, bi, "ln2_gamma", &b.ln2_gamma});
    refs.push_back({kSectionFfn, bi, "ln2_beta", &b.ln2_beta});
    refs.push_back({kSectionFfn, bi, "fc1_w", &b.fc1_w});
    refs.push_back({kSectionFfn, bi, "fc1_b", &b.fc1_b});
    refs.push_back({kSectionFfn, bi, "dw_w", &b.dw_w});
    refs.push_back({kSectionFfn, bi, "dw_b", &b.dw_b});
    refs.push_back({kSectionFfn, bi, "fc2_w", &b.fc2_w});
    refs.push_back({kSectionFfn, bi, "fc2_b", &b.fc2_b});
  }
  refs.push_back({kSectionHead, -1, "head_w", &head_w});
  refs.push_back({kSectionHead, -1, "head_b", &head_b});
  return refs;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& r : const_cast<Model*>(this)->parameters()) n += r.tensor->numel();
  return n;
}

BoundModel bind(Tape& tape, Model& model, bool trainable) {
  BoundModel bound;
  std::unordered_map<const Tensor*, Var> by_addr;
  for (const auto& r : model.parameters()) {
    Var v = trainable ? tape.parameter(*r.tensor) : tape.constant(*r.tensor);
    by_addr.emplace(r.tensor, v);
    bound.params.push_back(v);
  }
  auto at = [&](const Tensor& t) { return by_addr.at(&t); };
  bound.patch_w = at(model.patch_w);
  bound.patch_b = at(model.patch_b);
  for (auto& b : model.blocks) {
    BoundBlock bb;
    bb.ln1_gamma = at(b.ln1_gamma);
    bb.ln1_beta = at(b.ln1_beta);
    bb.attn.w_q = at(b.attn.w_q);
    bb.attn.w_k = b.attn.w_k ? at(*b.attn.w_k) : bb.attn.w_q;
    bb.attn.w_v = at(b.attn.w_v);
    bb.attn.w_o = at(b.attn.w_o);
    bb.attn.b_q = at(b.attn.b_q);
    bb.attn.b_k = at(b.attn.b_k);
    bb.attn.b_v = at(b.attn.b_v);
    bb.attn.b_o = at(b.attn.b_o);
    if (b.bias_table) bb.bias_table = at(*b.bias_table);
    bb.ln2_gamma = at(b.ln2_gamma);
    bb.ln2_beta = at(b.ln2_beta);
    bb.fc1_w = at(b.fc1_w);
    bb.fc1_b = at(b.fc1_b);
    bb.dw_w = at(b.dw_w);
    bb.dw_b = at(b.dw_b);
    bb.sam = sam::SamVars{at(b.sam.kernel), at(b.sam.bias)};
    bb.fc2_w = at(b.fc2_w);
    bb.fc2_b = at(b.fc2_b);
    bound.blocks.push_back(bb);
  }
  bound.head_w = at(model.head_w);
  bound.head_b = at(model.head_b);
  return bound;
}

Var patch_embed(const Var& image, const BoundModel& bound, const ModelConfig& config) {
  const auto s = config.image_size, p = config.patch_size, g = config.grid();
  if (image.shape() != Shape{3, s, s}) {
    throw ConfigError("image " + shape_str(image.shape()) + " does not match image_size=" + std::to_string(s));
  }
  FlopScope scope(image.tape()->counter(), "stem");
  Var patches = ag::reshape(image, {3, g, p, g, p});
  patches = ag::permute(patches, {1, 3, 0, 2, 4});
  patches = ag::reshape(patches, {g * g, config.patch_dim()});
  return ag::linear(patches, bound.patch_w, bound.patch_b);
}

Var block_forward(const Var& x, const BoundBlock& block, const BlockParams& params, const ModelConfig& config,
                  std::size_t block_index, const ForwardContext& ctx, ModelProbe* probe) {
  const auto g = config.grid(), l = config.tokens(), c = config.embed_dim, hidden = config.hidden();
  if (x.shape() != Shape{l, c}) {
    throw DimensionError("block input " + shape_str(x.shape()) + " does not match [" + std::to_string(l) + "x" +
                         std::to_string(c) + "]");
  }
  FlopCounter* counter = x.tape()->counter();
  FlopScope block_scope(counter, "block" + std::to_string(block_index));

  Var h;
  {
    FlopScope scope(counter, "norm");
    h = ag::layer_norm(x, block.ln1_gamma, block.ln1_beta);
  }
  attention::AttentionProbe attn_probe;
  Var attn_out;
  {
    FlopScope scope(counter, "attention");
    if (config.attention == AttentionVariant::Windowed) {
      auto geom = attention::WindowGeometry::make(g, g, config.window);
      auto part = std::make_shared<const std::vector<std::size_t>>(attention::partition_index(geom));
      auto merge = std::make_shared<const std::vector<std::size_t>>(attention::merge_index(geom));
      Var windows = ag::reshape(ag::gather_rows(h, part), {geom.num_windows(), geom.tokens_per_window(), c});
      Var bias = ag::gather_table(*block.bias_table, params.bias_index.entries, params.bias_index.side());
      Var out = attention::multi_head_attention(windows, block.attn, params.attn, bias, ctx, probe ? &attn_probe : nullptr);
      attn_out = ag::gather_rows(ag::reshape(out, {l, c}), merge);
    } else {
      Var seq = ag::reshape(h, {1, l, c});
      Var out = attention::multi_head_attention(seq, block.attn, params.attn, std::nullopt, ctx,
                                                probe ? &attn_probe : nullptr);
      attn_out = ag::reshape(out, {l, c});
    }
  }
  Var y;
  {
    FlopScope scope(counter, "residual");
    y = ag::add(x, attn_out);
  }
  Var f;
  {
    FlopScope scope(counter, "norm");
    f = ag::layer_norm(y, block.ln2_gamma, block.ln2_beta);
  }
  {
    FlopScope scope(counter, "ffn");
    f = ag::gelu(ag::linear(f, block.fc1_w, block.fc1_b));
  }
  f = ag::reshape(ag::transpose2d(f), {hidden, g, g});
  {
    FlopScope scope(counter, "dwconv");
    f = ag::depthwise_conv2d(f, block.dw_w, block.dw_b, 1);
  }
  Tensor sam_map;
  {
    FlopScope scope(counter, "sam");
    f = sam::sam_residual(f, block.sam, probe ? &sam_map : nullptr);
  }
  f = ag::transpose2d(ag::reshape(f, {hidden, l}));
  {
    FlopScope scope(counter, "ffn");
    f = ag::linear(f, block.fc2_w, block.fc2_b);
  }
  Var out;
  {
    FlopScope scope(counter, "residual");
    out = ag::add(y, f);
  }
  if (probe) {
    probe->sam_maps.push_back(std::move(sam_map));
    probe->attention.push_back(std::move(attn_probe));
  }
  return out;
}

Var logits(const Var& image, const BoundModel& bound, const Model& model, const ForwardContext& ctx,
           ModelProbe* probe) {
  const auto& config = model.config();
  Var x = patch_embed(image, bound, config);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    x = block_forward(x, bound.blocks[i], model.blocks[i], config, i, ctx, probe);
  }
  FlopScope scope(image.tape()->counter(), "head");
  Var pooled = ag::reshape(ag::mean_rows(x), {1, config.embed_dim});
  return ag::reshape(ag::linear(pooled, bound.head_w, bound.head_b), {config.num_classes});
}

Tensor patch_embed(const Tensor& image, Model& model) {
  Tape tape;
  auto bound = bind(tape, model, false);
  const auto& c = model.config();
  return patch_embed(tape.constant(image), bound, c).value().reshaped({c.grid(), c.grid(), c.embed_dim});
}

Tensor block_forward(const Tensor& x, Model& model, std::size_t block_index, bool training, std::uint64_t seed) {
  const auto& c = model.config();
  if (block_index >= model.blocks.size()) throw ContractError("block index out of range");
  if (x.shape() != Shape{c.grid(), c.grid(), c.embed_dim}) {
    throw DimensionError("block input " + shape_str(x.shape()) + " does not match the configured token grid");
  }
  Tape tape;
  Rng rng(seed);
  auto bound = bind(tape, model, false);
  Var in = tape.constant(x.reshaped({c.tokens(), c.embed_dim}));
  Var out = block_forward(in, bound.blocks[block_index], model.blocks[block_index], c, block_index,
                          ForwardContext{training, &rng});
  return out.value().reshaped(x.shape());
}

Tensor classify(const Tensor& image, Model& model, FlopCounter* counter, ModelProbe* probe) {
  Tape tape;
  auto bound = bind(tape, model, false);
  Var img = tape.constant(image);
  tape.set_counter(counter);
  return logits(img, bound, model, ForwardContext{false, nullptr}, probe).value();
}

void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const auto cfg = model.config().serialize();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto groups = group_sections(model.parameters());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(groups.size()));
  for (const auto& g : groups) {
    out.write(g.tag.data(), 4);
    put<std::uint32_t>(out, g.block < 0 ? kNoBlock : static_cast<std::uint32_t>(g.block));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(g.params.size()));
    for (const auto& p : g.params) write_tensor(out, *p.tensor);
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write to '" + path + "' failed");
}

namespace {

Model read_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint '" + path + "'");
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint '" + path + "' truncated in header");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(CheckpointError::Kind::Magic, "'" + path + "' is not a model checkpoint (magic mismatch)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::Version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = get<std::uint32_t>(in);
  if (cfg_len > (1u << 20)) throw CheckpointError(CheckpointError::Kind::Truncated, "implausible config length");
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated in config");
  ModelConfig stored;
  try {
    stored = ModelConfig::parse(cfg_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::Truncated, std::string("corrupt checkpoint config: ") + e.what());
  }
  const ModelConfig& config = expected ? *expected : stored;
  Model model = Model::init(config);
  auto groups = group_sections(model.parameters());
  const auto count = get<std::uint32_t>(in);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const auto label = section_label(g.tag, g.block);
    if (gi >= count) {
      throw CheckpointError(CheckpointError::Kind::Shape, "section " + label + " missing from checkpoint");
    }
    char tag[4];
    in.read(tag, 4);
    if (!in) throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint truncated before section " + label);
    const auto block = get<std::uint32_t>(in);
    const auto tensors = get<std::uint32_t>(in);
    const std::uint32_t want_block = g.block < 0 ? kNoBlock : static_cast<std::uint32_t>(g.block);
    if (std::string(tag, 4) != g.tag || block != want_block) {
      throw CheckpointError(CheckpointError::Kind::Shape, "expected section " + label + ", found '" +
                                                              std::string(tag, 4) + "'");
    }
    if (tensors != g.params.size()) {
      throw CheckpointError(CheckpointError::Kind::Shape, "section " + label + " holds " + std::to_string(tensors) +
                                                              " tensors, expected " + std::to_string(g.params.size()));
    }
    for (const auto& p : g.params) {
      Tensor t;
      try {
        t = read_tensor(in);
      } catch (const DimensionError& e) {
        throw CheckpointError(CheckpointError::Kind::Truncated,
                              "section " + label + " tensor " + p.name + ": " + e.what());
      }
      if (t.shape() != p.tensor->shape()) {
        throw CheckpointError(CheckpointError::Kind::Shape, "section " + label + " tensor " + p.name + ": expected " +
                                                                shape_str(p.tensor->shape()) + ", found " +
                                                                shape_str(t.shape()));
      }
      *p.tensor = t.dtype() == config.dtype ? std::move(t) : t.as(config.dtype);
    }
  }
  if (count != groups.size()) {
    throw CheckpointError(CheckpointError::Kind::Shape, "checkpoint holds " + std::to_string(count) +
                                                            " sections, expected " + std::to_string(groups.size()));
  }
  return model;
}

}  // namespace

Model load_checkpoint(const std::string& path) { return read_checkpoint(path, nullptr); }

Model load_checkpoint(const std::string& path, const ModelConfig& expected) {
  expected.validate();
  return read_checkpoint(path, &expected);
}

}  // namespace winvit::model
