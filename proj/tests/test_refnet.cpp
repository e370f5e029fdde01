#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "pepp/losses.hpp"
#include "pepp/refnet.hpp"

using namespace pepp;

namespace {

double rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) /
         std::max(1e-8, std::abs(analytic) + std::abs(fd));
}

// Smallest full configuration: 2x2 token grid, 16x16 output.
NetConfig tiny_config() {
  NetConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.predictor_dim = 8;
  c.encoder_blocks = 1;
  c.predictor_blocks = 1;
  c.decoder_channels = {4, 4, 4};  // 2 -> 4 -> 8 -> 16
  c.k = 2;
  c.n = 3;
  c.G = 2;
  return c;
}

Eigen::MatrixXd random_image(const NetConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd image(config.image_size, config.image_size);
  for (Eigen::Index i = 0; i < image.size(); ++i) *(image.data() + i) = u(rng);
  return image;
}

PatchMask random_mask(int M, std::mt19937_64& rng) {
  std::vector<char> flags(M, 0);
  std::uniform_int_distribution<int> coin(0, 2);
  int masked = 0;
  for (int i = 0; i < M; ++i)
    if (coin(rng) == 0) {
      flags[i] = 1;
      ++masked;
    }
  if (masked == 0) flags[0] = 1;
  if (masked == M) flags[M - 1] = 0;
  return PatchMask::from_masked_flags(flags);
}

}  // namespace

// ---------------------------------------------------------------------------
// NetConfig
// ---------------------------------------------------------------------------

TEST_CASE("config validation enforces the decoder shape contract") {
  NetConfig c = tiny_config();
  REQUIRE_NOTHROW(c.validate());

  NetConfig bad = c;
  bad.patch_size = 5;  // 16 % 5 != 0
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.decoder_channels = {4, 4};  // 2 -> 4 -> 8 != 16
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.G = 0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.embed_dim = 6;  // not divisible by 4
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json round-trips") {
  const NetConfig c = tiny_config();
  const NetConfig back = NetConfig::from_json(c.to_json());
  REQUIRE(back.image_size == c.image_size);
  REQUIRE(back.patch_size == c.patch_size);
  REQUIRE(back.embed_dim == c.embed_dim);
  REQUIRE(back.predictor_dim == c.predictor_dim);
  REQUIRE(back.decoder_channels == c.decoder_channels);
  REQUIRE(back.k == c.k);
  REQUIRE(back.n == c.n);
  REQUIRE(back.G == c.G);
}

// ---------------------------------------------------------------------------
// patchify and positional embeddings
// ---------------------------------------------------------------------------

TEST_CASE("patchify slices patches row-major and flattens row-major") {
  NetConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  c.decoder_channels = {4};  // 2 -> 4
  c.embed_dim = 4;
  c.predictor_dim = 4;
  Eigen::MatrixXd image(4, 4);
  // image(y, x) = 10*y + x makes every patch entry recognizable.
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) image(y, x) = 10.0 * y + x;
  const Eigen::MatrixXd patches = patchify(image, c);
  REQUIRE(patches.rows() == 4);
  REQUIRE(patches.cols() == 4);
  // Patch 0 covers pixels (0,0),(0,1),(1,0),(1,1).
  REQUIRE(patches(0, 0) == 0.0);
  REQUIRE(patches(1, 0) == 1.0);
  REQUIRE(patches(2, 0) == 10.0);
  REQUIRE(patches(3, 0) == 11.0);
  // Patch 1 is the top-right 2x2 block.
  REQUIRE(patches(0, 1) == 2.0);
  REQUIRE(patches(3, 1) == 13.0);
  // Patch 2 is the bottom-left block (row-major grid order).
  REQUIRE(patches(0, 2) == 20.0);
}

TEST_CASE("sinusoidal positions are bounded, deterministic, and distinct") {
  const Eigen::MatrixXd pos = sincos_positions(16, 4);
  REQUIRE(pos.rows() == 16);
  REQUIRE(pos.cols() == 16);
  REQUIRE(pos.minCoeff() >= -1.0);
  REQUIRE(pos.maxCoeff() <= 1.0);
  REQUIRE(pos == sincos_positions(16, 4));
  for (int a = 0; a < 16; ++a)
    for (int b = a + 1; b < 16; ++b)
      REQUIRE((pos.col(a) - pos.col(b)).norm() > 1e-6);
}

// ---------------------------------------------------------------------------
// encode / predict_embeddings
// ---------------------------------------------------------------------------

TEST_CASE("encode returns one row per context patch") {
  std::mt19937_64 rng(11);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(5);
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);

  const EmbeddingSet all = encode(model, patches, PatchMask::empty(c.patch_count()));
  REQUIRE(all.rows() == c.patch_count());
  REQUIRE(all.vectors.cols() == c.embed_dim);
  REQUIRE(all.vectors.allFinite());

  PatchMask mask = PatchMask::from_masked_flags({1, 0, 0, 1});
  const EmbeddingSet ctx = encode(model, patches, mask);
  REQUIRE(ctx.rows() == 2);
}

TEST_CASE("encode row count on a 14x14 grid with 40 masked patches") {
  NetConfig c;
  c.image_size = 112;
  c.patch_size = 8;  // 14x14 grid, M = 196
  c.embed_dim = 8;
  c.predictor_dim = 8;
  c.encoder_blocks = 1;
  c.predictor_blocks = 1;
  c.decoder_channels = {4, 4, 4};  // 14 -> 28 -> 56 -> 112
  c.k = 2;
  c.n = 3;
  c.validate();
  Model model(c);
  model.init(6);
  std::mt19937_64 rng(12);
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
  std::vector<char> flags(196, 0);
  for (int i = 0; i < 40; ++i) flags[i * 4] = 1;
  const EmbeddingSet ctx = encode(model, patches, PatchMask::from_masked_flags(flags));
  REQUIRE(ctx.rows() == 156);
}

TEST_CASE("toy 32px config yields at most 16 context rows") {
  NetConfig c;
  c.image_size = 32;
  c.patch_size = 8;  // 4x4 grid
  c.embed_dim = 16;
  c.predictor_dim = 16;
  c.encoder_blocks = 1;
  c.predictor_blocks = 1;
  c.decoder_channels = {8, 8, 8};  // 4 -> 8 -> 16 -> 32
  c.k = 3;
  c.n = 4;
  c.validate();
  Model model(c);
  model.init(7);
  std::mt19937_64 rng(13);
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
  const EmbeddingSet all = encode(model, patches, PatchMask::empty(16));
  REQUIRE(all.rows() == 16);
}

TEST_CASE("predict_embeddings always restores all M positions") {
  std::mt19937_64 rng(14);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(8);
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);

  for (const auto& flags :
       {std::vector<char>{0, 0, 0, 0}, std::vector<char>{1, 0, 1, 0},
        std::vector<char>{1, 1, 1, 0}}) {
    const PatchMask mask = PatchMask::from_masked_flags(flags);
    const EmbeddingSet ctx = encode(model, patches, mask);
    const EmbeddingSet pred = predict_embeddings(model, ctx, mask);
    REQUIRE(pred.rows() == c.patch_count());
    REQUIRE(pred.vectors.allFinite());
  }

  const PatchMask mask = PatchMask::from_masked_flags({1, 0, 0, 0});
  const EmbeddingSet ctx = encode(model, patches, mask);
  REQUIRE_THROWS_AS(
      predict_embeddings(model, ctx, PatchMask::from_masked_flags({1, 1, 0, 0})),
      ShapeMismatch);
}

TEST_CASE("predictor output is equivariant to context ordering") {
  std::mt19937_64 rng(15);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(9);
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
  const PatchMask mask = PatchMask::from_masked_flags({0, 1, 0, 0});
  EncoderCache enc_cache;
  const Eigen::MatrixXd ctx =
      model.encoder.forward(patches, mask.context, enc_cache);

  PredictorCache c1, c2;
  const Eigen::MatrixXd out =
      model.predictor.forward(ctx, mask.context, mask.M, c1);
  // Feed the same tokens in reversed order with matching position ids.
  std::vector<int> rev_ids(mask.context.rbegin(), mask.context.rend());
  const Eigen::MatrixXd rev_ctx = ctx.rowwise().reverse();
  const Eigen::MatrixXd out_rev =
      model.predictor.forward(rev_ctx, rev_ids, mask.M, c2);
  REQUIRE((out - out_rev).cwiseAbs().maxCoeff() < 1e-9);
}

// ---------------------------------------------------------------------------
// EMA target
// ---------------------------------------------------------------------------

TEST_CASE("ema_update follows the convex combination exactly") {
  EmaState state;
  state.target_weights = Eigen::VectorXd::Zero(5);

  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(5);
  const EmaState unchanged = ema_update(state, ones, 1.0);
  REQUIRE(unchanged.target_weights.isZero(0.0));

  const EmaState replaced = ema_update(state, ones, 0.0);
  REQUIRE((replaced.target_weights - ones).norm() == 0.0);

  const EmaState nudged = ema_update(state, ones, 0.996);
  for (int i = 0; i < 5; ++i)
    REQUIRE(nudged.target_weights(i) == Catch::Approx(0.004).margin(1e-15));

  state.target_weights = Eigen::VectorXd::Zero(4);
  REQUIRE_THROWS_AS(ema_update(state, ones, 0.5), DimensionMismatch);
}

TEST_CASE("ema momentum ramps linearly from 0.996 to 1.0") {
  REQUIRE(ema_momentum(0, 100) == 0.996);
  REQUIRE(ema_momentum(100, 100) == 1.0);
  REQUIRE(ema_momentum(50, 100) == Catch::Approx(0.998).margin(1e-12));
  REQUIRE(ema_momentum(200, 100) == 1.0);  // clamped past the end
  double prev = -1.0;
  for (int s = 0; s <= 100; ++s) {
    const double m = ema_momentum(s, 100);
    REQUIRE(m >= prev);
    prev = m;
  }
}

TEST_CASE("target drift decays monotonically under a frozen encoder") {
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(10);
  // Push the target away from the encoder, then repeatedly average back.
  EmaState state;
  state.target_weights = flatten_params(model.target_params());
  state.target_weights.array() += 0.5;
  const Eigen::VectorXd encoder = flatten_params(model.encoder_params());
  double prev = (state.target_weights - encoder).norm();
  REQUIRE(prev > 0.0);
  for (int step = 0; step < 20; ++step) {
    state = ema_update(state, encoder, 0.9);
    const double drift = (state.target_weights - encoder).norm();
    REQUIRE(drift < prev);
    prev = drift;
  }
}

// ---------------------------------------------------------------------------
// joint head
// ---------------------------------------------------------------------------

TEST_CASE("joint head is the zero map when its MLP is zero") {
  NetConfig c = tiny_config();
  c.G = 7;
  const JointHead head("h", c);  // parameters default to zero
  JointHeadCache cache;
  const Eigen::VectorXd phi =
      head.forward(Eigen::VectorXd::Random(c.embed_dim), cache);
  REQUIRE(phi.size() == c.joint_outputs());
  REQUIRE(phi.isZero(0.0));
}

TEST_CASE("joint head unrolls additively: constant MLP c gives G*c") {
  NetConfig c = tiny_config();
  c.G = 4;
  JointHead head("h", c);
  // Zero weights + fc2 bias make MLP(z) == bias for every input z.
  head.fc2.bias.value(0, 0) = 0.25;
  head.fc2.bias.value(1, 0) = -1.5;
  JointHeadCache cache;
  const Eigen::VectorXd phi =
      head.forward(Eigen::VectorXd::Random(c.embed_dim), cache);
  REQUIRE(phi(0) == Catch::Approx(4 * 0.25).margin(1e-12));
  REQUIRE(phi(1) == Catch::Approx(4 * -1.5).margin(1e-12));
}

TEST_CASE("joint head gradient w.r.t. v_g matches finite differences") {
  std::mt19937_64 rng(16);
  const NetConfig c = tiny_config();
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = 1e-6;
  for (int instance = 0; instance < 100; ++instance) {
    JointHead head("h", c);
    head.init(rng);
    Eigen::VectorXd vg(c.embed_dim);
    for (int i = 0; i < c.embed_dim; ++i) vg(i) = gauss(rng);
    Eigen::VectorXd upstream(c.joint_outputs());
    for (int i = 0; i < c.joint_outputs(); ++i) upstream(i) = gauss(rng);

    JointHeadCache cache;
    head.forward(vg, cache);
    const Eigen::VectorXd dvg = head.backward(upstream, cache);
    for (int i = 0; i < c.embed_dim; ++i) {
      const auto eval = [&](double delta) {
        Eigen::VectorXd v = vg;
        v(i) += delta;
        JointHeadCache tmp;
        return upstream.dot(head.forward(v, tmp));
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      REQUIRE(rel_err(dvg(i), fd) < 1e-4);
    }
  }
}

// ---------------------------------------------------------------------------
// keypoint head
// ---------------------------------------------------------------------------

TEST_CASE("keypoint head doubles the grid once per stage") {
  NetConfig c;
  c.image_size = 16;
  c.patch_size = 4;  // m = 4
  c.embed_dim = 4;
  c.predictor_dim = 4;
  c.decoder_channels = {4, 4};  // 4 -> 8 -> 16
  c.k = 3;
  c.n = 3;
  c.validate();
  KeypointHead head("kp", c);
  std::mt19937_64 rng(17);
  head.init(rng);
  KeypointHeadCache cache;
  const HeatmapStack out =
      head.forward(Eigen::MatrixXd::Random(c.embed_dim, 16), cache);
  REQUIRE(out.height == 16);
  REQUIRE(out.width == 16);
  REQUIRE(out.k() == 3);
  for (const auto& channel : out.channels) {
    REQUIRE(channel.minCoeff() > 0.0);
    REQUIRE(channel.maxCoeff() < 1.0);
  }
}

TEST_CASE("published decoder geometry validates: 14x14 tokens reach 224") {
  NetConfig c;
  c.image_size = 224;
  c.patch_size = 16;  // m = 14
  c.embed_dim = 768;
  c.predictor_dim = 384;
  c.encoder_blocks = 2;
  c.predictor_blocks = 2;
  c.decoder_channels = {256, 256, 256, 256};  // 14 -> ... -> 224
  c.k = 7;
  c.n = 8;
  REQUIRE_NOTHROW(c.validate());
  const KeypointHead head("kp", c);
  REQUIRE(head.stages.size() == 4);
  REQUIRE(head.stages[0].in_channels == 768);
  REQUIRE(head.stages[0].out_channels == 256);
  REQUIRE(head.stages[3].out_channels == 256);
  REQUIRE(head.proj.in_channels == 256);
  REQUIRE(head.proj.out_channels == 7);

  NetConfig bad = c;
  bad.decoder_channels = {256, 256, 256};  // 14 -> 112 only
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("keypoint head rejects non-square token counts") {
  const NetConfig c = tiny_config();
  KeypointHead head("kp", c);
  std::mt19937_64 rng(18);
  head.init(rng);
  KeypointHeadCache cache;
  REQUIRE_THROWS_AS(head.forward(Eigen::MatrixXd::Random(c.embed_dim, 3), cache),
                    NonSquarePatchCount);
}

TEST_CASE("keypoint head parameter gradients match finite differences") {
  std::mt19937_64 rng(19);
  NetConfig c;
  c.image_size = 8;
  c.patch_size = 4;  // m = 2
  c.embed_dim = 4;
  c.predictor_dim = 4;
  c.decoder_channels = {4, 4};  // 2 -> 4 -> 8
  c.k = 2;
  c.n = 3;
  c.validate();
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = 1e-6;
  int instances = 0;
  for (int instance = 0; instance < 100; ++instance) {
    KeypointHead head("kp", c);
    head.init(rng);
    const Eigen::MatrixXd tokens = Eigen::MatrixXd::NullaryExpr(
        c.embed_dim, 4, [&]() { return gauss(rng); });
    // Random linear functional over the heatmaps keeps the check exact.
    HeatmapStack weights = HeatmapStack::zeros(8, 8, c.k);
    for (auto& ch : weights.channels)
      ch = Eigen::MatrixXd::NullaryExpr(8, 8, [&]() { return gauss(rng); });

    std::vector<Param*> params;
    head.collect(params);
    for (Param* p : params) p->zero_grad();
    KeypointHeadCache cache;
    const HeatmapStack out = head.forward(tokens, cache);
    double base = 0.0;
    for (int ch = 0; ch < c.k; ++ch)
      base += weights.channels[ch].cwiseProduct(out.channels[ch]).sum();
    head.backward(weights, cache);

    // Spot-check a handful of coordinates per parameter to keep runtime low.
    std::uniform_int_distribution<int> pick(0, 1 << 30);
    for (Param* p : params) {
      for (int probe = 0; probe < 4; ++probe) {
        const Eigen::Index idx = pick(rng) % p->value.size();
        const double saved = *(p->value.data() + idx);
        const auto eval = [&](double delta) {
          *(p->value.data() + idx) = saved + delta;
          KeypointHeadCache tmp;
          const HeatmapStack o = head.forward(tokens, tmp);
          double acc = 0.0;
          for (int ch = 0; ch < c.k; ++ch)
            acc += weights.channels[ch].cwiseProduct(o.channels[ch]).sum();
          return acc;
        };
        const double fd = (eval(h) - eval(-h)) / (2.0 * h);
        *(p->value.data() + idx) = saved;
        const double analytic = *(p->grad.data() + idx);
        if (std::abs(analytic) < 1e-7 && std::abs(fd) < 1e-7) continue;
        REQUIRE(rel_err(analytic, fd) < 1e-4);
      }
    }
    ++instances;
  }
  REQUIRE(instances == 100);
}

// ---------------------------------------------------------------------------
// full network
// ---------------------------------------------------------------------------

TEST_CASE("shape contract: encode -> predict -> heads for several configs") {
  std::mt19937_64 rng(20);
  std::vector<NetConfig> configs;
  configs.push_back(tiny_config());
  {
    NetConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.embed_dim = 12;
    c.predictor_dim = 8;
    c.encoder_blocks = 2;
    c.predictor_blocks = 1;
    c.decoder_channels = {6, 5, 4};
    c.k = 5;
    c.n = 4;
    c.G = 3;
    configs.push_back(c);
  }
  for (const NetConfig& c : configs) {
    c.validate();
    Model model(c);
    model.init(21);
    const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
    FullForward fwd = full_forward(model, patches, PatchMask::empty(c.patch_count()));
    REQUIRE(fwd.tokens.cols() == c.patch_count());
    REQUIRE(fwd.phi.size() == c.n - 1);
    REQUIRE(fwd.heatmaps.height == c.image_size);
    REQUIRE(fwd.heatmaps.width == c.image_size);
    REQUIRE(fwd.heatmaps.k() == c.k);
  }
}

TEST_CASE("full toy network gradients match finite differences everywhere") {
  std::mt19937_64 rng(22);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(23);
  const Eigen::MatrixXd image = random_image(c, rng);
  const Eigen::MatrixXd patches = patchify(image, c);
  const PatchMask mask = PatchMask::empty(c.patch_count());

  // Ground truth for the combined fine-tuning loss; identity normalizer so
  // the raw targets already live in normalized space.
  Eigen::VectorXd gt_joints(c.joint_outputs());
  gt_joints << 0.3, -0.8;
  JointNormalizer norm;
  norm.mean = Eigen::VectorXd::Zero(c.joint_outputs());
  norm.std = Eigen::VectorXd::Ones(c.joint_outputs());
  const HeatmapStack gt_heat = gaussian_heatmap(
      {Vec2(5.0, 7.0), Vec2(11.0, 3.0)}, c.image_size, c.image_size, 2.0);
  const double alpha = 0.5;

  const auto loss_of = [&](Model& m) {
    FullForward fwd = full_forward(m, patches, mask);
    const JointMseLoss mse = joint_mse(fwd.phi, gt_joints, norm);
    const FocalLoss focal = focal_loss(fwd.heatmaps, gt_heat);
    return mse.value + alpha * focal.value;
  };

  model.zero_grad();
  FullForward fwd = full_forward(model, patches, mask);
  const JointMseLoss mse = joint_mse(fwd.phi, gt_joints, norm);
  FocalLoss focal = focal_loss(fwd.heatmaps, gt_heat);
  HeatmapStack dheat = focal.grad_pred;
  for (auto& ch : dheat.channels) ch *= alpha;
  full_backward(model, fwd, mse.grad_pred, &dheat);

  const double h = 1e-5;
  int checked = 0;
  for (Param* p : model.params()) {
    // Probe a deterministic subset of coordinates in every parameter so the
    // whole network is covered while the test stays fast.
    const Eigen::Index stride = std::max<Eigen::Index>(1, p->value.size() / 6);
    for (Eigen::Index idx = 0; idx < p->value.size(); idx += stride) {
      const double saved = *(p->value.data() + idx);
      *(p->value.data() + idx) = saved + h;
      const double up = loss_of(model);
      *(p->value.data() + idx) = saved - h;
      const double down = loss_of(model);
      *(p->value.data() + idx) = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = *(p->grad.data() + idx);
      ++checked;
      if (std::abs(analytic) < 1e-7 && std::abs(fd) < 1e-7) continue;
      INFO(p->name << "[" << idx << "]");
      REQUIRE(rel_err(analytic, fd) < 1e-3);
    }
  }
  REQUIRE(checked >= 100);
}

TEST_CASE("pretraining path gradients match finite differences") {
  std::mt19937_64 rng(24);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(25);
  // Separate the target from the encoder so the L1 loss has a clean slope
  // (at the init the branches are identical and every term sits on the kink).
  for (Param* p : model.target_params()) p->value.array() += 0.05;
  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
  const PatchMask mask = PatchMask::from_masked_flags({0, 1, 0, 1});

  const auto loss_of = [&](Model& m) {
    PretrainForward fwd = pretrain_forward(m, patches, mask);
    return pretrain_l1(fwd.predicted, fwd.targets, mask.masked).value;
  };

  model.zero_grad();
  PretrainForward fwd = pretrain_forward(model, patches, mask);
  const PretrainLoss loss = pretrain_l1(fwd.predicted, fwd.targets, mask.masked);
  pretrain_backward(model, fwd, loss.grad_predicted);

  const double h = 1e-6;
  std::vector<Param*> trained;
  model.encoder.collect(trained);
  model.predictor.collect(trained);
  for (Param* p : trained) {
    const Eigen::Index stride = std::max<Eigen::Index>(1, p->value.size() / 4);
    for (Eigen::Index idx = 0; idx < p->value.size(); idx += stride) {
      const double saved = *(p->value.data() + idx);
      *(p->value.data() + idx) = saved + h;
      const double up = loss_of(model);
      *(p->value.data() + idx) = saved - h;
      const double down = loss_of(model);
      *(p->value.data() + idx) = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = *(p->grad.data() + idx);
      if (std::abs(analytic) < 1e-7 && std::abs(fd) < 1e-7) continue;
      INFO(p->name << "[" << idx << "]");
      REQUIRE(rel_err(analytic, fd) < 1e-3);
    }
  }
}

TEST_CASE("backward never touches the target branch") {
  std::mt19937_64 rng(26);
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(27);
  for (Param* p : model.target_params()) p->value.array() += 0.01;
  const Eigen::VectorXd before = flatten_params(model.target_params());

  const Eigen::MatrixXd patches = patchify(random_image(c, rng), c);
  const PatchMask mask = PatchMask::from_masked_flags({0, 1, 1, 0});
  model.zero_grad();
  PretrainForward fwd = pretrain_forward(model, patches, mask);
  const PretrainLoss loss = pretrain_l1(fwd.predicted, fwd.targets, mask.masked);
  pretrain_backward(model, fwd, loss.grad_predicted);
  AdamW opt({.lr = 1e-2});
  opt.step(model.params());

  const Eigen::VectorXd after = flatten_params(model.target_params());
  REQUIRE((before - after).cwiseAbs().maxCoeff() == 0.0);

  // The online encoder did move.
  const EmaState moved = ema_update(
      EmaState{before, 0.996}, flatten_params(model.encoder_params()), 0.5);
  REQUIRE((moved.target_weights - before).cwiseAbs().maxCoeff() > 0.0);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

TEST_CASE("optimizer descends, honors lr scaling, and decays weights") {
  Param p("p", 2, 1);
  p.value << 1.0, -1.0;
  p.grad << 0.5, -0.5;
  AdamW opt({.lr = 0.1});
  opt.step({&p});
  // First step moves by ~lr against the gradient sign.
  REQUIRE(p.value(0) < 1.0);
  REQUIRE(p.value(1) > -1.0);

  Param frozen("f", 1, 1);
  frozen.value(0, 0) = 3.0;
  frozen.grad(0, 0) = 10.0;
  frozen.lr_scale = 0.0;
  AdamW opt2({.lr = 0.1});
  opt2.step({&frozen});
  REQUIRE(frozen.value(0, 0) == 3.0);

  Param decayed("d", 1, 1);
  decayed.value(0, 0) = 2.0;
  decayed.grad(0, 0) = 0.0;
  AdamW opt3({.lr = 0.1, .weight_decay = 0.1});
  opt3.step({&decayed});
  REQUIRE(decayed.value(0, 0) < 2.0);
  REQUIRE(decayed.value(0, 0) == Catch::Approx(2.0 * (1.0 - 0.01)).margin(1e-12));
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  const NetConfig c = tiny_config();
  Model model(c);
  model.init(28);
  // Make the branches distinct so the payload exercises every section.
  for (Param* p : model.target_params()) p->value.array() *= 0.5;

  const std::string path = "refnet_ckpt_test.bin";
  save_checkpoint(path, model);
  Model back = load_checkpoint(path);
  REQUIRE(back.config.image_size == c.image_size);
  REQUIRE(back.config.decoder_channels == c.decoder_channels);

  const Eigen::VectorXd a = flatten_params(model.all_params());
  const Eigen::VectorXd b = flatten_params(back.all_params());
  REQUIRE(a.size() == b.size());
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);

  // Same seed, same init.
  Model twin(c);
  twin.init(28);
  for (Param* p : twin.target_params()) p->value.array() *= 0.5;
  REQUIRE((flatten_params(twin.all_params()) - a).cwiseAbs().maxCoeff() == 0.0);

  std::ofstream bad(path, std::ios::binary);
  bad.write("NOTACKPT", 8);
  bad.close();
  REQUIRE_THROWS_AS(load_checkpoint(path), DataError);
  std::remove(path.c_str());
}
