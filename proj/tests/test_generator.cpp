#include "support/doctest_torch.hpp"

#include "p2ld/config.hpp"
#include "p2ld/generator.hpp"

using namespace p2ld;

namespace {

// Output side of a conv/pool layer.
int64_t out_side(int64_t in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

// Shape-tracing oracle: walks the ResNeXt-50 layer table (7×7/2 stem, 3×3/2 max-pool,
// stride on the grouped 3×3 of each stage's first block) without building a network.
std::vector<std::array<int64_t, 3>> trace_encoder_shapes(const GeneratorConfig& cfg, int64_t side) {
  std::vector<std::array<int64_t, 3>> out;
  side = out_side(side, 7, 2, 3);
  out.push_back({cfg.encoder_stages[0].out_channels, side, side});
  side = out_side(side, 3, 2, 1);
  for (int i = 1; i < 5; ++i) {
    const auto& s = cfg.encoder_stages[i];
    side = out_side(side, 3, s.stride, 1);
    out.push_back({s.out_channels, side, side});
  }
  return out;
}

GeneratorConfig small_config(int size) {
  auto cfg = GeneratorConfig::miniature();
  cfg.input_size = size;
  return cfg;
}

}  // namespace

TEST_CASE("resnext_block with zeroed transformation paths is the identity") {
  torch::manual_seed(0);
  ResNeXtBlock block(16, 16, 8, 4, 1);
  block->zero_residual_branch();
  CHECK_FALSE(block->has_projection());
  // Block inputs inside the encoder are post-ReLU, hence non-negative.
  const auto x = torch::rand({2, 16, 9, 9});
  CHECK(torch::equal(block->forward(x), x));
}

TEST_CASE("resnext_block shapes") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  SUBCASE("64x256x256 to 256 channels at stride 1") {
    ResNeXtBlock block(64, 256, 128, 32, 1);
    CHECK(block->forward(torch::rand({1, 64, 256, 256})).sizes() == torch::IntArrayRef{1, 256, 256, 256});
  }
  SUBCASE("256x128x128 to 512 channels at stride 2") {
    ResNeXtBlock block(256, 512, 256, 32, 2);
    CHECK(block->forward(torch::rand({1, 256, 128, 128})).sizes() == torch::IntArrayRef{1, 512, 64, 64});
  }
  CHECK_THROWS_AS(ResNeXtBlock(64, 256, 100, 32, 1), ConfigError);
}

TEST_CASE("generator config validation") {
  GeneratorConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.encoder_stages[2].cardinality = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.input_size = 100;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.decoder_channels.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.encoder_stages[3].blocks = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.encoder_stages[1].stride = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("generator config JSON round trip with explicit defaults") {
  GeneratorConfig cfg;
  cfg.fusion_mode = FusionMode::Concat;
  cfg.decoder_block = DecoderBlock::ConvTransposeUp;
  cfg.skips_enabled = false;
  cfg.pretrained_encoder = "weights.pt";
  const nlohmann::json j = cfg;
  CHECK(j.at("fusion_mode") == "concat");
  CHECK(j.at("decoder_block") == "convtranspose_up");
  CHECK(j.at("encoder_stages").size() == 5);
  CHECK(j.at("output_channels") == 3);
  CHECK(j.get<GeneratorConfig>() == cfg);

  const auto from_empty = nlohmann::json::object().get<GeneratorConfig>();
  CHECK(from_empty == GeneratorConfig{});
  CHECK_THROWS_AS(nlohmann::json({{"fusion", "sum"}}).get<GeneratorConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"fusion_mode", "product"}}).get<GeneratorConfig>(), ConfigError);
}

TEST_CASE("encoder shape ladder at S=512 matches the traced layer table") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  GeneratorConfig cfg;
  Encoder enc(cfg.encoder_stages);
  const auto feats = enc->forward(torch::rand({1, 3, 512, 512}) * 2 - 1);
  const auto expected = trace_encoder_shapes(cfg, 512);
  const std::array<std::array<int64_t, 3>, 5> literal = {
      {{64, 256, 256}, {256, 128, 128}, {512, 64, 64}, {1024, 32, 32}, {2048, 16, 16}}};
  REQUIRE(feats.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(expected[i] == literal[i]);
    CHECK(feats[i].sizes() == torch::IntArrayRef{1, literal[i][0], literal[i][1], literal[i][2]});
  }
}

TEST_CASE("encoder at the minimum size and with a batch") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  GeneratorConfig cfg;
  Encoder enc(cfg.encoder_stages);
  CHECK(enc->forward(torch::zeros({1, 3, 32, 32})).back().sizes() == torch::IntArrayRef{1, 2048, 1, 1});

  auto mini = small_config(64);
  Encoder small(mini.encoder_stages);
  const auto feats = small->forward(torch::zeros({3, 3, 64, 64}));
  for (int i = 0; i < 5; ++i) {
    CHECK(feats[i].size(0) == 3);
    CHECK(feats[i].size(2) == (64 >> (i + 1)));
  }
}

TEST_CASE("generator rejects wrong channel counts") {
  torch::manual_seed(0);
  Generator g(small_config(32));
  CHECK_THROWS_AS(g->forward(torch::zeros({1, 1, 32, 32})), std::invalid_argument);
  CHECK_THROWS_AS(g->forward(torch::zeros({1, 3, 48, 48})), std::invalid_argument);
}

TEST_CASE("pds halving arithmetic and shapes") {
  CHECK(pds_halvings(256, 32) == 3);
  CHECK(pds_halvings(16, 16) == 0);
  CHECK_THROWS_AS(pds_halvings(16, 32), std::invalid_argument);
  CHECK_THROWS_AS(pds_halvings(48, 16), std::invalid_argument);
  CHECK_THROWS_AS(pds_halvings(24, 16), std::invalid_argument);

  torch::NoGradGuard guard;
  torch::manual_seed(0);
  Pds down(64, 1024, pds_halvings(256, 32));
  int convs = 0;
  for (const auto& m : down->modules(false))
    if (m->as<nn::Conv2dImpl>()) ++convs;
  CHECK(convs == 3);
  CHECK(down->forward(torch::rand({1, 64, 256, 256})).sizes() == torch::IntArrayRef{1, 1024, 32, 32});

  Pds project(2048, 1024, pds_halvings(16, 16));
  const auto* only = project->body[0]->as<nn::Conv2dImpl>();
  REQUIRE(only != nullptr);
  CHECK(only->options.kernel_size()->at(0) == 1);
  CHECK(project->forward(torch::rand({1, 2048, 16, 16})).sizes() == torch::IntArrayRef{1, 1024, 16, 16});
}

TEST_CASE("fuse in sum mode") {
  const auto x = torch::randn({1, 4, 3, 3});
  CHECK(torch::equal(fuse_sum(x, {torch::zeros_like(x), torch::zeros_like(x)}, 0), x));

  const auto a = torch::tensor({1.0, 2.0}).view({1, 1, 1, 2});
  const auto b = torch::tensor({3.0, 4.0}).view({1, 1, 1, 2});
  CHECK(torch::equal(fuse_sum(a, {b}, 0), torch::tensor({4.0, 6.0}).view({1, 1, 1, 2})));

  try {
    fuse_sum(torch::zeros({1, 64, 4, 4}), {torch::zeros({1, 128, 4, 4})}, 2);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("stage 2") != std::string::npos);
  }
}

TEST_CASE("nearest-neighbour upsampling") {
  const auto x = torch::tensor({1.0, 2.0, 3.0, 4.0}).view({1, 1, 2, 2});
  const auto expected = torch::tensor({1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0})
                            .view({1, 1, 4, 4});
  CHECK(torch::equal(upsample_nearest2x(x), expected));
}

TEST_CASE("decode layers double the resolution") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  for (auto kind : {DecoderBlock::ConvUp, DecoderBlock::ConvTransposeUp}) {
    CAPTURE(to_string(kind));
    DecodeLayer layer(1024, 1024, kind);
    CHECK(layer->forward(torch::rand({1, 1024, 16, 16})).sizes() == torch::IntArrayRef{1, 1024, 32, 32});

    auto h = torch::rand({1, 4, 16, 16});
    for (int i = 0; i < 5; ++i) h = DecodeLayer(4, 4, kind)->forward(h);
    CHECK(h.sizes() == torch::IntArrayRef{1, 4, 512, 512});
  }
}

TEST_CASE("decoder wiring: each stage sees every encoder feature at or above its resolution once") {
  torch::manual_seed(0);
  Generator g(small_config(64));
  const std::vector<std::vector<int>> expected = {{0, 1, 2, 3, 4}, {0, 1, 2, 3}, {0, 1, 2}, {0, 1}, {0}};
  for (int s = 0; s < 5; ++s) {
    CHECK(g->contributors(s) == expected[s]);
    CHECK(g->pds[s]->size() == expected[s].size());
  }

  auto off = small_config(64);
  off.skips_enabled = false;
  Generator plain(off);
  CHECK(plain->contributors(0) == std::vector<int>{4});
  for (int s = 1; s < 5; ++s) CHECK(plain->contributors(s).empty());
}

TEST_CASE("generate preserves shape and range for any valid size") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  GeneratorConfig cfg;
  cfg.input_size = 128;
  Generator g(cfg);
  const auto out = g->forward(torch::rand({2, 3, 128, 128}) * 2 - 1);
  CHECK(out.sizes() == torch::IntArrayRef{2, 3, 128, 128});
  CHECK(out.abs().max().item<float>() < 1.0f);
}

TEST_CASE("generate variants run with both fusion modes and decoder blocks") {
  torch::NoGradGuard guard;
  for (auto fusion : {FusionMode::Sum, FusionMode::Concat})
    for (auto block : {DecoderBlock::ConvUp, DecoderBlock::ConvTransposeUp})
      for (bool skips : {true, false}) {
        auto cfg = small_config(64);
        cfg.fusion_mode = fusion;
        cfg.decoder_block = block;
        cfg.skips_enabled = skips;
        torch::manual_seed(1);
        Generator g(cfg);
        const auto out = g->forward(torch::rand({1, 3, 64, 64}) * 2 - 1);
        CHECK(out.sizes() == torch::IntArrayRef{1, 3, 64, 64});
        CHECK(torch::isfinite(out).all().item<bool>());
      }
}

TEST_CASE("zero output convolution gives exactly zero") {
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  Generator g(small_config(64));
  g->output_conv->weight.zero_();
  g->output_conv->bias.zero_();
  const auto out = g->forward(torch::rand({1, 3, 64, 64}) * 2 - 1);
  CHECK(torch::equal(out, torch::zeros_like(out)));
}

TEST_CASE("skip ablation equals a full generator with zeroed skip contributions") {
  torch::NoGradGuard guard;
  for (auto fusion : {FusionMode::Sum}) {
    auto with = small_config(64);
    with.fusion_mode = fusion;
    auto without = with;
    without.skips_enabled = false;
    torch::manual_seed(3);
    Generator full(with);
    torch::manual_seed(4);
    Generator plain(without);

    // Shared layers carry identical names; copy the ablated generator's weights over.
    // Stage 0's F5 projection is pds0.4 in the full network and pds0.0 in the plain one.
    auto dst = full->named_parameters();
    for (const auto& item : plain->named_parameters()) {
      auto name = item.key();
      if (name.rfind("pds0.0.", 0) == 0) name = "pds0.4." + name.substr(7);
      REQUIRE(dst.contains(name));
      dst[name].copy_(item.value());
    }
    SkipMask none{};
    for (auto& row : none) row.fill(false);
    const auto x = torch::rand({1, 3, 64, 64}) * 2 - 1;
    CHECK(torch::allclose(full->forward(x, none), plain->forward(x), 0.0, 0.0));
    CHECK_FALSE(torch::allclose(full->forward(x), plain->forward(x)));
  }
}

TEST_CASE("weight manifest lists every parameter with its shape") {
  torch::manual_seed(0);
  Generator g(small_config(32));
  const auto manifest = weight_manifest(*g);
  std::size_t params = 0;
  for (const auto& p : g->named_parameters()) {
    (void)p;
    ++params;
  }
  CHECK(manifest.size() >= params);
  CHECK(manifest.front().name == "encoder.stem.0.weight");
  CHECK(manifest.front().shape == std::vector<int64_t>{4, 3, 7, 7});
}

TEST_CASE("pretrained encoder weights load by name") {
  torch::manual_seed(0);
  auto cfg = small_config(32);
  Encoder source(cfg.encoder_stages);
  const auto path = std::filesystem::temp_directory_path() / "p2ld_encoder_test.pt";
  {
    torch::serialize::OutputArchive ar;
    for (const auto& item : source->named_parameters()) ar.write(item.key(), item.value());
    ar.save_to(path.string());
  }
  cfg.pretrained_encoder = path.string();
  torch::manual_seed(99);
  Generator g(cfg);
  for (const auto& item : source->named_parameters())
    CHECK(torch::equal(g->encoder->named_parameters()[item.key()], item.value()));

  cfg.pretrained_encoder = (std::filesystem::temp_directory_path() / "p2ld_missing_weights.pt").string();
  CHECK_THROWS(Generator(cfg));
  std::filesystem::remove(path);
}
