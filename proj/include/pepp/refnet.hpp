#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pepp/heatmap.hpp"
#include "pepp/masking.hpp"
#include "pepp/nn.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Network configuration. The decoder ladder doubles the m x m token grid once
// per stage and must land exactly on image_size.
// ---------------------------------------------------------------------------

struct NetConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 32;
  int predictor_dim = 32;
  int encoder_blocks = 2;
  int predictor_blocks = 2;
  std::vector<int> decoder_channels = {32, 32, 32};
  int k = 4;  // keypoint channels
  int n = 3;  // joint count; the head regresses n-1 values
  int G = 4;  // refinement steps

  int grid_side() const { return image_size / patch_size; }
  int patch_count() const { return grid_side() * grid_side(); }
  int patch_dim() const { return patch_size * patch_size; }
  int joint_outputs() const { return n - 1; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (embed_dim % 4 != 0 || predictor_dim % 4 != 0)
      throw ConfigError("embedding dims must be divisible by 4 for 2D "
                        "sinusoidal positions");
    if (encoder_blocks < 1 || predictor_blocks < 1 || G < 1)
      throw ConfigError("block and refinement counts must be >= 1");
    if (k < 1 || n < 2) throw ConfigError("need k >= 1 and n >= 2");
    int side = grid_side();
    for (size_t i = 0; i < decoder_channels.size(); ++i) {
      if (decoder_channels[i] < 1)
        throw ConfigError("decoder channels must be positive");
      side *= 2;
    }
    if (side != image_size)
      throw ConfigError("decoder stages must upsample the token grid exactly "
                        "to image_size");
  }

  nlohmann::json to_json() const {
    return {{"image_size", image_size},       {"patch_size", patch_size},
            {"embed_dim", embed_dim},         {"predictor_dim", predictor_dim},
            {"encoder_blocks", encoder_blocks},
            {"predictor_blocks", predictor_blocks},
            {"decoder_channels", decoder_channels},
            {"k", k},
            {"n", n},
            {"G", G}};
  }

  static NetConfig from_json(const nlohmann::json& j) {
    NetConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.predictor_dim = j.at("predictor_dim").get<int>();
    c.encoder_blocks = j.at("encoder_blocks").get<int>();
    c.predictor_blocks = j.at("predictor_blocks").get<int>();
    c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
    c.k = j.at("k").get<int>();
    c.n = j.at("n").get<int>();
    c.G = j.at("G").get<int>();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Embedding sets exchanged between the pipeline stages: one token per row.
// Internally the layers keep tokens as columns; the public operations
// transpose at the boundary.
// ---------------------------------------------------------------------------

struct EmbeddingSet {
  Eigen::MatrixXd vectors;  // rows = tokens, cols = embed dim

  Eigen::Index rows() const { return vectors.rows(); }
};

// ---------------------------------------------------------------------------
// Patch tokenization: grayscale image (H x W matrix, element (y, x)) to a
// (patch_size^2) x M matrix. Patches are ordered row-major over the grid and
// flattened row-major within the patch.
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd patchify(const Eigen::MatrixXd& image,
                                const NetConfig& config) {
  if (image.rows() != config.image_size || image.cols() != config.image_size)
    throw ShapeMismatch("image does not match configured size");
  const int ps = config.patch_size;
  const int side = config.grid_side();
  Eigen::MatrixXd patches(config.patch_dim(), config.patch_count());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int id = r * side + c;
      for (int py = 0; py < ps; ++py)
        for (int px = 0; px < ps; ++px)
          patches(py * ps + px, id) = image(r * ps + py, c * ps + px);
    }
  return patches;
}

// ---------------------------------------------------------------------------
// Fixed 2D sinusoidal positional embeddings: half the channels encode the
// grid row, half the column, each as interleaved sin/cos pairs.
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd sincos_positions(int dim, int side) {
  if (dim % 4 != 0) throw ConfigError("positional embedding dim % 4 != 0");
  const int half = dim / 2;
  Eigen::MatrixXd pos(dim, side * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int id = r * side + c;
      for (int i = 0; i < half / 2; ++i) {
        const double omega =
            std::pow(10000.0, -2.0 * i / static_cast<double>(half));
        pos(2 * i, id) = std::sin(r * omega);
        pos(2 * i + 1, id) = std::cos(r * omega);
        pos(half + 2 * i, id) = std::sin(c * omega);
        pos(half + 2 * i + 1, id) = std::cos(c * omega);
      }
    }
  return pos;
}

// ---------------------------------------------------------------------------
// Context encoder: patch embedding + positions, transformer blocks, final
// LayerNorm. Operates on any subset of patch ids.
// ---------------------------------------------------------------------------

struct EncoderCache {
  LinearCache embed;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  std::vector<int> ids;
};

struct Encoder {
  Linear patch_embed;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Eigen::MatrixXd positions;  // fixed, d x M

  Encoder() = default;
  Encoder(const std::string& name, const NetConfig& config) {
    const int d = config.embed_dim;
    patch_embed = Linear(name + ".patch_embed", config.patch_dim(), d);
    for (int b = 0; b < config.encoder_blocks; ++b)
      blocks.emplace_back(name + ".block" + std::to_string(b), d, 4 * d);
    final_ln = LayerNorm(name + ".final_ln", d);
    positions = sincos_positions(d, config.grid_side());
  }

  void init(std::mt19937_64& rng) {
    patch_embed.init(rng);
    for (auto& b : blocks) b.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    patch_embed.collect(out);
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
  }

  /// Encode the patch columns listed in `ids` (d x |ids| output).
  Eigen::MatrixXd forward(const Eigen::MatrixXd& patches,
                          const std::vector<int>& ids,
                          EncoderCache& cache) const {
    Eigen::MatrixXd selected(patches.rows(), ids.size());
    for (size_t j = 0; j < ids.size(); ++j)
      selected.col(j) = patches.col(ids[j]);
    cache.ids = ids;
    Eigen::MatrixXd x = patch_embed.forward(selected, cache.embed);
    for (size_t j = 0; j < ids.size(); ++j) x.col(j) += positions.col(ids[j]);
    cache.blocks.resize(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b)
      x = blocks[b].forward(x, cache.blocks[b]);
    return final_ln.forward(x, cache.final_ln);
  }

  /// Accumulates parameter gradients; the input image is a leaf, so no
  /// gradient is returned.
  void backward(const Eigen::MatrixXd& dy, EncoderCache& cache) {
    Eigen::MatrixXd g = final_ln.backward(dy, cache.final_ln);
    for (size_t b = blocks.size(); b-- > 0;)
      g = blocks[b].backward(g, cache.blocks[b]);
    patch_embed.backward(g, cache.embed);
  }
};

// ---------------------------------------------------------------------------
// Predictor: projects context embeddings into its own width, fills masked
// positions with a learnable mask token, runs transformer blocks over all M
// positions, and projects back to the encoder width.
// ---------------------------------------------------------------------------

struct PredictorCache {
  LinearCache proj_in;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  LinearCache proj_out;
  std::vector<int> context_ids;
  int M = 0;
};

struct Predictor {
  Linear proj_in;   // d -> pd
  Param mask_token;  // pd x 1
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear proj_out;  // pd -> d
  Eigen::MatrixXd positions;  // fixed, pd x M

  Predictor() = default;
  Predictor(const std::string& name, const NetConfig& config)
      : proj_in(name + ".proj_in", config.embed_dim, config.predictor_dim),
        mask_token(name + ".mask_token", config.predictor_dim, 1),
        final_ln(name + ".final_ln", config.predictor_dim),
        proj_out(name + ".proj_out", config.predictor_dim, config.embed_dim) {
    const int pd = config.predictor_dim;
    for (int b = 0; b < config.predictor_blocks; ++b)
      blocks.emplace_back(name + ".block" + std::to_string(b), pd, 4 * pd);
    positions = sincos_positions(pd, config.grid_side());
  }

  void init(std::mt19937_64& rng) {
    proj_in.init(rng);
    init_uniform(mask_token, static_cast<int>(mask_token.value.rows()), rng);
    for (auto& b : blocks) b.init(rng);
    proj_out.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    proj_in.collect(out);
    out.push_back(&mask_token);
    for (auto& b : blocks) b.collect(out);
    final_ln.collect(out);
    proj_out.collect(out);
  }

  /// context: d x |B| embeddings whose columns correspond to context_ids.
  /// Returns d x M predictions in patch-id order.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& context,
                          const std::vector<int>& context_ids, int M,
                          PredictorCache& cache) const {
    if (context.cols() != static_cast<Eigen::Index>(context_ids.size()))
      throw ShapeMismatch("context embeddings do not match position ids");
    cache.context_ids = context_ids;
    cache.M = M;
    const Eigen::MatrixXd projected = proj_in.forward(context, cache.proj_in);
    Eigen::MatrixXd x = mask_token.value.col(0).replicate(1, M);
    for (size_t j = 0; j < context_ids.size(); ++j)
      x.col(context_ids[j]) = projected.col(j);
    x += positions.leftCols(M);
    cache.blocks.resize(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b)
      x = blocks[b].forward(x, cache.blocks[b]);
    x = final_ln.forward(x, cache.final_ln);
    return proj_out.forward(x, cache.proj_out);
  }

  /// Returns the gradient w.r.t. the context embeddings (d x |B|).
  Eigen::MatrixXd backward(const Eigen::MatrixXd& dy, PredictorCache& cache) {
    Eigen::MatrixXd g = proj_out.backward(dy, cache.proj_out);
    g = final_ln.backward(g, cache.final_ln);
    for (size_t b = blocks.size(); b-- > 0;)
      g = blocks[b].backward(g, cache.blocks[b]);
    std::vector<char> is_context(cache.M, 0);
    Eigen::MatrixXd dprojected(g.rows(), cache.context_ids.size());
    for (size_t j = 0; j < cache.context_ids.size(); ++j) {
      dprojected.col(j) = g.col(cache.context_ids[j]);
      is_context[cache.context_ids[j]] = 1;
    }
    for (int id = 0; id < cache.M; ++id)
      if (!is_context[id]) mask_token.grad.col(0) += g.col(id);
    return proj_in.backward(dprojected, cache.proj_in);
  }
};

// ---------------------------------------------------------------------------
// Joint Net head: iterative refinement with a shared two-layer MLP.
// Phi_0 = 0; Phi_{g+1} = Phi_g + MLP(v_g concat Phi_g); returns Phi_G.
// ---------------------------------------------------------------------------

struct JointHeadCache {
  std::vector<LinearCache> fc1;
  std::vector<GeluCache> act;
  std::vector<LinearCache> fc2;
};

struct JointHead {
  int out_dim = 0;
  int G = 1;
  Linear fc1;  // (d + out) -> hidden
  Linear fc2;  // hidden -> out

  JointHead() = default;
  JointHead(const std::string& name, const NetConfig& config)
      : out_dim(config.joint_outputs()), G(config.G) {
    const int in = config.embed_dim + out_dim;
    const int hidden = 2 * config.embed_dim;
    fc1 = Linear(name + ".fc1", in, hidden);
    fc2 = Linear(name + ".fc2", hidden, out_dim);
  }

  void init(std::mt19937_64& rng) {
    fc1.init(rng);
    fc2.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& vg,
                          JointHeadCache& cache) const {
    cache.fc1.resize(G);
    cache.act.resize(G);
    cache.fc2.resize(G);
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(out_dim);
    for (int g = 0; g < G; ++g) {
      Eigen::VectorXd z(vg.size() + out_dim);
      z << vg, phi;
      const Eigen::MatrixXd hidden =
          gelu_forward(fc1.forward(z, cache.fc1[g]), cache.act[g]);
      phi += fc2.forward(hidden, cache.fc2[g]).col(0);
    }
    return phi;
  }

  /// Returns the gradient w.r.t. the pooled embedding v_g.
  Eigen::VectorXd backward(const Eigen::VectorXd& dphi_final,
                           JointHeadCache& cache) {
    const Eigen::Index d = cache.fc1[0].input.rows() - out_dim;
    Eigen::VectorXd dvg = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd dphi = dphi_final;
    for (int g = G; g-- > 0;) {
      const Eigen::MatrixXd dhidden =
          gelu_backward(fc2.backward(dphi, cache.fc2[g]), cache.act[g]);
      const Eigen::VectorXd dz = fc1.backward(dhidden, cache.fc1[g]).col(0);
      dvg += dz.head(d);
      dphi += dz.tail(out_dim);
    }
    return dvg;
  }
};

// ---------------------------------------------------------------------------
// Keypoint Net head: token grid reshaped to m x m x d, upsampled by
// transpose-conv stages with ReLU, then a 1x1 projection and sigmoid.
// ---------------------------------------------------------------------------

struct KeypointHeadCache {
  std::vector<TransposeConvCache> stages;
  std::vector<ReluCache> relu;
  Conv1x1Cache proj;
  SigmoidCache sigmoid;
};

struct KeypointHead {
  int grid = 0;
  std::vector<TransposeConv2d> stages;
  Conv1x1 proj;

  KeypointHead() = default;
  KeypointHead(const std::string& name, const NetConfig& config)
      : grid(config.grid_side()) {
    int ch = config.embed_dim;
    for (size_t s = 0; s < config.decoder_channels.size(); ++s) {
      stages.emplace_back(name + ".up" + std::to_string(s), ch,
                          config.decoder_channels[s]);
      ch = config.decoder_channels[s];
    }
    proj = Conv1x1(name + ".proj", ch, config.k);
  }

  void init(std::mt19937_64& rng) {
    for (auto& s : stages) s.init(rng);
    proj.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    for (auto& s : stages) s.collect(out);
    proj.collect(out);
  }

  /// tokens: d x M with M = grid^2; token j maps to cell (j / grid, j % grid).
  HeatmapStack forward(const Eigen::MatrixXd& tokens,
                       KeypointHeadCache& cache) const {
    const int m = grid;
    if (tokens.cols() != m * m)
      throw NonSquarePatchCount("keypoint head needs a square token grid");
    FeatureMap x(tokens.rows(), Eigen::MatrixXd::Zero(m, m));
    for (Eigen::Index c = 0; c < tokens.rows(); ++c)
      for (int j = 0; j < m * m; ++j) x[c](j / m, j % m) = tokens(c, j);
    cache.stages.resize(stages.size());
    cache.relu.resize(stages.size());
    for (size_t s = 0; s < stages.size(); ++s) {
      x = stages[s].forward(x, cache.stages[s]);
      x = relu_forward(x, cache.relu[s]);
    }
    x = proj.forward(x, cache.proj);
    x = sigmoid_forward(x, cache.sigmoid);
    HeatmapStack out;
    out.height = static_cast<int>(x[0].rows());
    out.width = static_cast<int>(x[0].cols());
    out.channels = x;
    return out;
  }

  /// Returns the gradient w.r.t. the input tokens (d x M).
  Eigen::MatrixXd backward(const HeatmapStack& dheat,
                           KeypointHeadCache& cache) {
    FeatureMap g = dheat.channels;
    g = sigmoid_backward(g, cache.sigmoid);
    g = proj.backward(g, cache.proj);
    for (size_t s = stages.size(); s-- > 0;) {
      g = relu_backward(g, cache.relu[s]);
      g = stages[s].backward(g, cache.stages[s]);
    }
    const int m = grid;
    Eigen::MatrixXd dtokens(g.size(), m * m);
    for (size_t c = 0; c < g.size(); ++c)
      for (int j = 0; j < m * m; ++j) dtokens(c, j) = g[c](j / m, j % m);
    return dtokens;
  }
};

// ---------------------------------------------------------------------------
// Full model: online encoder, EMA target encoder, predictor, and both heads.
// The target encoder never takes gradients; it only moves via ema_update.
// ---------------------------------------------------------------------------

struct Model {
  NetConfig config;
  Encoder encoder;
  Encoder target;  // EMA copy, excluded from params()
  Predictor predictor;
  JointHead joint_head;
  KeypointHead keypoint_head;

  Model() = default;
  explicit Model(const NetConfig& cfg)
      : config(cfg),
        encoder("encoder", cfg),
        target("target", cfg),
        predictor("predictor", cfg),
        joint_head("joint_head", cfg),
        keypoint_head("keypoint_head", cfg) {
    config.validate();
  }

  void init(uint64_t seed) {
    std::mt19937_64 rng(seed);
    encoder.init(rng);
    predictor.init(rng);
    joint_head.init(rng);
    keypoint_head.init(rng);
    sync_target();
  }

  /// Trainable parameters in a fixed, deterministic order.
  std::vector<Param*> params() {
    std::vector<Param*> out;
    encoder.collect(out);
    predictor.collect(out);
    joint_head.collect(out);
    keypoint_head.collect(out);
    return out;
  }

  std::vector<Param*> encoder_params() {
    std::vector<Param*> out;
    encoder.collect(out);
    return out;
  }

  std::vector<Param*> target_params() {
    std::vector<Param*> out;
    target.collect(out);
    return out;
  }

  /// All parameters including the target branch (checkpoint payload).
  std::vector<Param*> all_params() {
    std::vector<Param*> out = params();
    target.collect(out);
    return out;
  }

  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }

  void sync_target() {
    load_flat_params(flatten_params(encoder_params()), target_params());
  }
};

// ---------------------------------------------------------------------------
// Public operations in pipeline vocabulary.
// ---------------------------------------------------------------------------

/// Encode the context patches selected by the mask; one embedding per row.
inline EmbeddingSet encode(const Model& model, const Eigen::MatrixXd& patches,
                           const PatchMask& mask) {
  if (patches.cols() != model.config.patch_count())
    throw ShapeMismatch("patch count does not match configuration");
  EncoderCache cache;
  EmbeddingSet out;
  out.vectors =
      model.encoder.forward(patches, mask.context, cache).transpose();
  return out;
}

/// Predict embeddings for all M patches from context embeddings + mask.
inline EmbeddingSet predict_embeddings(const Model& model,
                                       const EmbeddingSet& context,
                                       const PatchMask& mask) {
  if (context.rows() != static_cast<Eigen::Index>(mask.context.size()))
    throw ShapeMismatch("context row count does not match mask");
  PredictorCache cache;
  EmbeddingSet out;
  out.vectors = model.predictor
                    .forward(context.vectors.transpose(), mask.context,
                             mask.M, cache)
                    .transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Training-step drivers. Each driver runs one forward pass, stashes every
// intermediate cache, and exposes the matching backward pass; parameter
// gradients accumulate into the model.
// ---------------------------------------------------------------------------

struct PretrainForward {
  EncoderCache encoder;
  PredictorCache predictor;
  Eigen::MatrixXd predicted;  // d x M
  Eigen::MatrixXd targets;    // d x M, no gradient
};

inline PretrainForward pretrain_forward(Model& model,
                                        const Eigen::MatrixXd& patches,
                                        const PatchMask& mask) {
  PretrainForward fwd;
  const Eigen::MatrixXd context =
      model.encoder.forward(patches, mask.context, fwd.encoder);
  fwd.predicted = model.predictor.forward(context, mask.context, mask.M,
                                          fwd.predictor);
  std::vector<int> all_ids(mask.M);
  for (int i = 0; i < mask.M; ++i) all_ids[i] = i;
  EncoderCache target_cache;
  fwd.targets = model.target.forward(patches, all_ids, target_cache);
  return fwd;
}

inline void pretrain_backward(Model& model, PretrainForward& fwd,
                              const Eigen::MatrixXd& dpredicted) {
  const Eigen::MatrixXd dcontext =
      model.predictor.backward(dpredicted, fwd.predictor);
  model.encoder.backward(dcontext, fwd.encoder);
}

struct FullForward {
  EncoderCache encoder;
  PredictorCache predictor;
  JointHeadCache joint;
  KeypointHeadCache keypoint;
  Eigen::MatrixXd tokens;  // predictor outputs, d x M
  Eigen::VectorXd pooled;  // global average over tokens
  Eigen::VectorXd phi;     // normalized joint estimates, n-1
  HeatmapStack heatmaps;
};

/// Fine-tuning / inference forward pass: context is the full patch set
/// (optionally reduced by a mask), predictor restores all M positions, and
/// both heads read the predictor outputs.
inline FullForward full_forward(Model& model, const Eigen::MatrixXd& patches,
                                const PatchMask& mask) {
  FullForward fwd;
  const Eigen::MatrixXd context =
      model.encoder.forward(patches, mask.context, fwd.encoder);
  fwd.tokens = model.predictor.forward(context, mask.context, mask.M,
                                       fwd.predictor);
  fwd.pooled = fwd.tokens.rowwise().mean();
  fwd.phi = model.joint_head.forward(fwd.pooled, fwd.joint);
  fwd.heatmaps = model.keypoint_head.forward(fwd.tokens, fwd.keypoint);
  return fwd;
}

/// Backward from head gradients; either may be empty (zero channel list /
/// zero-size phi gradient) to skip that branch.
inline void full_backward(Model& model, FullForward& fwd,
                          const Eigen::VectorXd& dphi,
                          const HeatmapStack* dheatmaps) {
  Eigen::MatrixXd dtokens =
      Eigen::MatrixXd::Zero(fwd.tokens.rows(), fwd.tokens.cols());
  if (dphi.size() > 0) {
    const Eigen::VectorXd dpooled = model.joint_head.backward(dphi, fwd.joint);
    const double inv = 1.0 / static_cast<double>(fwd.tokens.cols());
    dtokens.colwise() += Eigen::VectorXd(inv * dpooled);
  }
  if (dheatmaps != nullptr)
    dtokens += model.keypoint_head.backward(*dheatmaps, fwd.keypoint);
  const Eigen::MatrixXd dcontext =
      model.predictor.backward(dtokens, fwd.predictor);
  model.encoder.backward(dcontext, fwd.encoder);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: magic, little-endian u64 header length, JSON header with
// the NetConfig and per-parameter offsets/shapes, then the little-endian
// float64 payload (column-major within each parameter).
// ---------------------------------------------------------------------------

namespace ckpt_detail {

constexpr char kMagic[8] = {'P', 'E', 'P', 'P', 'C', 'K', 'P', 'T'};

inline void put_u64(std::ostream& out, uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw DataError("truncated checkpoint header");
    v |= static_cast<uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, Model& model,
                            const nlohmann::json& extra = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  const std::vector<Param*> params = model.all_params();
  nlohmann::json header;
  header["config"] = model.config.to_json();
  if (!extra.is_null() && !extra.empty()) header["extra"] = extra;
  nlohmann::json plist = nlohmann::json::array();
  uint64_t offset = 0;
  for (const Param* p : params) {
    plist.push_back({{"name", p->name},
                     {"rows", p->value.rows()},
                     {"cols", p->value.cols()},
                     {"offset", offset}});
    offset += static_cast<uint64_t>(p->value.size());
  }
  header["params"] = plist;
  const std::string text = header.dump();
  out.write(ckpt_detail::kMagic, 8);
  ckpt_detail::put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Param* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double v = *(p->value.data() + i);
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      ckpt_detail::put_u64(out, bits);
    }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

inline Model load_checkpoint(const std::string& path,
                             nlohmann::json* extra = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
    throw DataError("bad checkpoint magic: " + path);
  const uint64_t header_len = ckpt_detail::get_u64(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len))
    throw DataError("truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw DataError("unparseable checkpoint header: " + path);
  }
  if (extra != nullptr) *extra = header.value("extra", nlohmann::json());
  Model model(NetConfig::from_json(header.at("config")));
  const std::vector<Param*> params = model.all_params();
  std::map<std::string, Param*> by_name;
  for (Param* p : params) by_name[p->name] = p;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("unknown parameter in checkpoint: " + name);
    Param* p = it->second;
    if (entry.at("rows").get<Eigen::Index>() != p->value.rows() ||
        entry.at("cols").get<Eigen::Index>() != p->value.cols())
      throw DataError("parameter shape mismatch: " + name);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const uint64_t bits = ckpt_detail::get_u64(in);
      double v;
      std::memcpy(&v, &bits, 8);
      *(p->value.data() + i) = v;
    }
  }
  if (!in) throw DataError("truncated checkpoint payload: " + path);
  return model;
}

}  // namespace pepp
