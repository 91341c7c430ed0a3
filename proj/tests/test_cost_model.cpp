#include <gtest/gtest.h>

#include "winvit/cost_model.hpp"
#include "winvit/errors.hpp"

using namespace winvit;
using namespace winvit::cost;
using model::ModelConfig;

namespace {

Tensor gray_image(std::size_t size) { return Tensor::full({3, size, size}, 0.5); }

ModelConfig grid14(AttentionVariant variant) {
  ModelConfig c;
  c.image_size = 112;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.heads = 2;
  c.window = 7;
  c.depth = 1;
  c.mlp_ratio = 1;
  c.attention = variant;
  return c;
}

}  // namespace

TEST(AttentionCost, HandCountedFormulas) {
  // L=64 tokens, C=16, h=4, M=4: projections 4 * 2LC^2, scores and weighted
  // sum 2 * 2 * L * M^2 * C.
  auto w = attention_cost(64, 16, 4, 4, AttentionVariant::Windowed);
  EXPECT_EQ(w.flops, 4u * 2 * 64 * 16 * 16 + 2u * 2 * 64 * 16 * 16);
  EXPECT_EQ(w.params, 4u * 16 * 16 + 4 * 16 + 4 * 49);
  auto g = attention_cost(64, 16, 4, 4, AttentionVariant::Global);
  EXPECT_EQ(g.flops, 4u * 2 * 64 * 16 * 16 + 2u * 2 * 64 * 64 * 16);
  EXPECT_EQ(g.params, 4u * 16 * 16 + 4 * 16);
  auto shared = attention_cost(64, 16, 4, 4, AttentionVariant::Windowed, attention::SharingMode::SharedQK);
  EXPECT_EQ(w.params - shared.params, 256u);
  EXPECT_EQ(w.flops, shared.flops);
}

TEST(AttentionCost, SingleWindowMatchesGlobalFlops) {
  for (std::size_t side : {2u, 4u, 7u}) {
    auto w = attention_cost(side * side, 8, 2, side, AttentionVariant::Windowed);
    auto g = attention_cost(side * side, 8, 2, side, AttentionVariant::Global);
    EXPECT_EQ(w.flops, g.flops);
    EXPECT_EQ(w.params - g.params, 2u * (2 * side - 1) * (2 * side - 1));
  }
}

TEST(AttentionCost, InteractionTermScalesWithWindow) {
  for (std::size_t side : {4u, 8u, 12u})
    for (std::size_t m = 1; m <= side; ++m) {
      if (side % m) continue;
      const auto l = side * side;
      const std::size_t c = 16;
      auto w = attention_cost(l, c, 4, m, AttentionVariant::Windowed);
      auto g = attention_cost(l, c, 4, m, AttentionVariant::Global);
      EXPECT_EQ(g.flops - w.flops, 4u * l * c * (l - m * m));
      EXPECT_LT(4u * (2 * m - 1) * (2 * m - 1), l * l);
    }
}

TEST(AttentionCost, RejectsBadGeometry) {
  EXPECT_THROW(attention_cost(60, 16, 4, 2, AttentionVariant::Windowed), ConfigError);
  EXPECT_THROW(attention_cost(64, 16, 4, 3, AttentionVariant::Windowed), ConfigError);
  EXPECT_THROW(attention_cost(64, 15, 4, 4, AttentionVariant::Windowed), ConfigError);
  EXPECT_NO_THROW(attention_cost(64, 16, 4, 3, AttentionVariant::Global));
}

TEST(CostModel, CoreMatmulRatioIsLOverWindowArea) {
  FlopTally core[2];
  int i = 0;
  for (auto variant : {AttentionVariant::Windowed, AttentionVariant::Global}) {
    auto m = model::Model::init(grid14(variant));
    core[i++] = instrumented_forward(m, gray_image(112)).counter.under("block0.attention.core");
  }
  EXPECT_EQ(core[0].matmul, 4u * 196 * 49 * 8);
  EXPECT_EQ(core[1].matmul, 4u * core[0].matmul);
}

TEST(CostModel, AnalyticalEqualsInstrumented) {
  std::vector<ModelConfig> configs(4);
  configs[1].window = 2;
  configs[1].sharing = attention::SharingMode::SharedQK;
  configs[2] = grid14(AttentionVariant::Windowed);
  configs[3].depth = 0;
  for (const auto& cfg : configs) {
    for (auto variant : {AttentionVariant::Windowed, AttentionVariant::Global}) {
      auto c = cfg;
      c.attention = variant;
      auto m = model::Model::init(c);
      auto analytical = model_cost(c, variant);
      auto run = instrumented_forward(m, gray_image(c.image_size));
      auto measured = measured_report(run.counter, analytical);
      ASSERT_EQ(measured.rows.size(), analytical.rows.size());
      for (std::size_t r = 0; r < analytical.rows.size(); ++r) {
        EXPECT_EQ(measured.rows[r], analytical.rows[r]) << analytical.rows[r].layer << "." << analytical.rows[r].name;
      }
      EXPECT_EQ(run.counter.total().total(), analytical.total_flops());
      EXPECT_EQ(analytical.total_params(), m.parameter_count());
    }
  }
}

TEST(CostModel, DeskDefaultTotals) {
  ModelConfig c;
  auto w = model_cost(c, AttentionVariant::Windowed);
  auto g = model_cost(c, AttentionVariant::Global);
  EXPECT_EQ(w.total_flops(), 29878147u);
  EXPECT_EQ(g.total_flops(), 33302403u);
  EXPECT_EQ(g.flops_of("attention") - w.flops_of("attention"), 4u * 64 * 64 * (64 - 16) * 4);
  EXPECT_EQ(w.total_params() - g.total_params(), 4u * 4 * 49);
  EXPECT_EQ(w.params_of("sam"), 4u * 99);
}

TEST(CostModel, ZeroDepthHasStemAndHeadOnly) {
  ModelConfig c;
  c.depth = 0;
  auto r = model_cost(c, AttentionVariant::Windowed);
  for (const auto& row : r.rows) EXPECT_TRUE(row.layer == "stem" || row.layer == "head") << row.layer;
  EXPECT_EQ(r.total_params(), 192u * 64 + 64 + 64 * 3 + 3);
}

TEST(CostModel, Formatting) {
  EXPECT_EQ(format_units(1234567), "1.235M");
  EXPECT_EQ(format_units(2500000000ull), "2.5G");
  ModelConfig c;
  c.depth = 0;
  auto csv = to_csv({model_cost(c, AttentionVariant::Windowed)});
  EXPECT_EQ(csv,
            "layer,name,params,flops,variant\n"
            "stem,patch_embed,12352,1572864,windowed\n"
            "stem,elementwise,0,4096,windowed\n"
            "head,head,195,384,windowed\n"
            "head,elementwise,0,4099,windowed\n");
}
