#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "cdpm/autograd.hpp"
#include "cdpm/rng.hpp"

using namespace cdpm;
using namespace cdpm::nn;
using ops::Id;

namespace {

using Builder = std::function<Id(Graph&, const std::vector<Id>&)>;

std::vector<double> randn(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

double loss_value(const Builder& f, const std::vector<Shape>& shapes, const std::vector<std::vector<double>>& vals,
                  const std::vector<double>& target) {
  Graph g(false);
  std::vector<Id> ids;
  for (std::size_t i = 0; i < shapes.size(); ++i) ids.push_back(g.parameter(shapes[i], vals[i], nullptr));
  return g.value(ops::mse(g, f(g, ids), target))[0];
}

// Compares reverse-mode gradients of mse(f(inputs), target) with central
// differences on every input element.
void check_gradients(const Builder& f, const std::vector<Shape>& shapes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> vals, grads;
  for (const auto& s : shapes) {
    vals.push_back(randn(numel(s), rng));
    grads.emplace_back(numel(s), 0.0);
  }
  std::vector<double> target;
  {
    Graph g(false);
    std::vector<Id> ids;
    for (std::size_t i = 0; i < shapes.size(); ++i) ids.push_back(g.parameter(shapes[i], vals[i], nullptr));
    target = randn(numel(g.shape(f(g, ids))), rng);
  }
  Graph g(true);
  std::vector<Id> ids;
  for (std::size_t i = 0; i < shapes.size(); ++i) ids.push_back(g.parameter(shapes[i], vals[i], &grads[i]));
  g.backward(ops::mse(g, f(g, ids), target));

  const double h = 1e-6;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t k = 0; k < vals[i].size(); ++k) {
      const double keep = vals[i][k];
      vals[i][k] = keep + h;
      const double up = loss_value(f, shapes, vals, target);
      vals[i][k] = keep - h;
      const double down = loss_value(f, shapes, vals, target);
      vals[i][k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[i][k];
      const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      // Central differences carry ~1e-9 rounding noise, which dominates
      // gradients that are exactly zero (e.g. key biases under softmax).
      EXPECT_TRUE(err < 1e-5 || std::abs(analytic - numeric) < 1e-8)
          << "input " << i << " element " << k << " analytic " << analytic << " numeric " << numeric;
    }
}

}  // namespace

TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(1);
  const std::size_t n = 2, ci = 3, co = 2, h = 4, w = 5;
  const auto x = randn(n * ci * h * w, rng), wt = randn(co * ci * 9, rng), b = randn(co, rng);
  Graph g(false);
  const Id out = ops::conv2d(g, g.constant({n, ci, h, w}, x), g.constant({co, ci, 3, 3}, wt), g.constant({co}, b));
  const auto& y = g.value(out);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const long yy = static_cast<long>(i) + dy, xx = static_cast<long>(j) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                acc += wt[((o * ci + c) * 3 + static_cast<std::size_t>(dy + 1)) * 3 + static_cast<std::size_t>(dx + 1)] *
                       x[((s * ci + c) * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
              }
          EXPECT_NEAR(y[((s * co + o) * h + i) * w + j], acc, 1e-12);
        }
}

TEST(GroupNorm, NormalizesEachGroup) {
  Rng rng(2);
  const std::size_t n = 2, c = 4, h = 3, w = 3;
  const auto x = randn(n * c * h * w, rng, 3.0);
  Graph g(false);
  const Id y = ops::group_norm(g, g.constant({n, c, h, w}, x), g.constant({c}, std::vector<double>(c, 1.0)),
                               g.constant({c}, std::vector<double>(c, 0.0)), 2);
  const auto& v = g.value(y);
  const std::size_t per = 2 * h * w;
  for (std::size_t grp = 0; grp < n * 2; ++grp) {
    double s = 0, sq = 0;
    for (std::size_t k = 0; k < per; ++k) {
      s += v[grp * per + k];
      sq += v[grp * per + k] * v[grp * per + k];
    }
    EXPECT_NEAR(s / per, 0.0, 1e-12);
    EXPECT_NEAR(sq / per, 1.0, 1e-3);  // eps = 1e-5 shrinks slightly
  }
}

TEST(SliceAttention, MatchesNaiveComputation) {
  Rng rng(3);
  const std::size_t n = 3, c = 4, h = 2, w = 1, heads = 2, dh = c / heads;
  const auto x = randn(n * c * h * w, rng);
  std::vector<std::vector<double>> p;
  for (int i = 0; i < 4; ++i) {
    p.push_back(randn(c * c, rng, 0.5));
    p.push_back(randn(c, rng, 0.5));
  }
  Graph g(false);
  ops::AttentionWeights aw{};
  Id* slots[] = {&aw.wq, &aw.bq, &aw.wk, &aw.bk, &aw.wv, &aw.bv, &aw.wo, &aw.bo};
  for (int i = 0; i < 8; ++i) *slots[i] = g.constant(i % 2 ? Shape{c} : Shape{c, c}, p[static_cast<std::size_t>(i)]);
  const auto& y = g.value(ops::slice_attention(g, g.constant({n, c, h, w}, x), aw, heads));
  auto proj = [&](int which, const std::vector<double>& tok) {
    std::vector<double> out(c);
    for (std::size_t o = 0; o < c; ++o) {
      out[o] = p[static_cast<std::size_t>(2 * which + 1)][o];
      for (std::size_t i = 0; i < c; ++i) out[o] += p[static_cast<std::size_t>(2 * which)][o * c + i] * tok[i];
    }
    return out;
  };
  for (std::size_t pos = 0; pos < h * w; ++pos) {
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t s = 0; s < n; ++s) {
      std::vector<double> tok(c);
      for (std::size_t ch = 0; ch < c; ++ch) tok[ch] = x[(s * c + ch) * h * w + pos];
      q[s] = proj(0, tok);
      k[s] = proj(1, tok);
      v[s] = proj(2, tok);
    }
    for (std::size_t s = 0; s < n; ++s) {
      std::vector<double> mixed(c, 0.0);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        std::vector<double> logits(n);
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0;
          for (std::size_t d = 0; d < dh; ++d) dot += q[s][hd * dh + d] * k[r][hd * dh + d];
          logits[r] = dot / std::sqrt(static_cast<double>(dh));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t d = 0; d < dh; ++d) mixed[hd * dh + d] += logits[r] / z * v[r][hd * dh + d];
      }
      const auto out = proj(3, mixed);
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(y[(s * c + ch) * h * w + pos], out[ch], 1e-12);
    }
  }
}

TEST(Gradients, Conv3x3) {
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::conv2d(g, in[0], in[1], in[2]); },
                  {{2, 2, 4, 4}, {3, 2, 3, 3}, {3}}, 10);
}

TEST(Gradients, Conv1x1) {
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::conv2d(g, in[0], in[1], in[2]); },
                  {{2, 3, 2, 2}, {2, 3, 1, 1}, {2}}, 11);
}

TEST(Gradients, GroupNorm) {
  check_gradients(
      [](Graph& g, const std::vector<Id>& in) { return ops::group_norm(g, in[0], in[1], in[2], 2); },
      {{2, 4, 2, 3}, {4}, {4}}, 12);
}

TEST(Gradients, SiluAddBias) {
  check_gradients(
      [](Graph& g, const std::vector<Id>& in) {
        return ops::silu(g, ops::add_channel_bias(g, ops::add(g, in[0], in[1]), in[2]));
      },
      {{2, 3, 2, 2}, {2, 3, 2, 2}, {1, 3}}, 13);
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::add_channel_bias(g, in[0], in[1]); },
                  {{2, 3, 2, 2}, {2, 3}}, 14);
}

TEST(Gradients, Linear) {
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::linear(g, in[0], in[1], in[2]); },
                  {{3, 4}, {2, 4}, {2}}, 15);
}

TEST(Gradients, ConcatPoolUpsample) {
  check_gradients(
      [](Graph& g, const std::vector<Id>& in) {
        return ops::upsample2(g, ops::avg_pool2(g, ops::concat_channels(g, in[0], in[1])));
      },
      {{2, 1, 4, 4}, {2, 2, 4, 4}}, 16);
}

TEST(Gradients, GatherAndSelect) {
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::gather_rows(g, in[0], {1, 0, 1}); },
                  {{2, 3}}, 17);
  check_gradients([](Graph& g, const std::vector<Id>& in) { return ops::select_slices(g, in[0], {2, 0}); },
                  {{3, 2, 2, 2}}, 18);
}

TEST(Gradients, SliceAttention) {
  check_gradients(
      [](Graph& g, const std::vector<Id>& in) {
        return ops::slice_attention(g, in[0], {in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]}, 2);
      },
      {{3, 4, 2, 2}, {4, 4}, {4}, {4, 4}, {4}, {4, 4}, {4}, {4, 4}, {4}}, 19);
}

TEST(Graph, ShapeErrors) {
  Graph g;
  const Id a = g.constant({1, 2, 2, 2}, std::vector<double>(8, 0.0));
  const Id b = g.constant({1, 3, 2, 2}, std::vector<double>(12, 0.0));
  EXPECT_THROW(ops::add(g, a, b), std::invalid_argument);
  EXPECT_THROW(g.constant({2, 2}, std::vector<double>(3, 0.0)), std::invalid_argument);
  const Id odd = g.constant({1, 1, 3, 3}, std::vector<double>(9, 0.0));
  EXPECT_THROW(ops::avg_pool2(g, odd), std::invalid_argument);
}

TEST(Graph, GradientsAccumulateIntoSink) {
  std::vector<double> v{1.0, 2.0}, sink{10.0, 10.0};
  Graph g;
  const Id p = g.parameter({1, 2}, v, &sink);
  g.backward(ops::mse(g, p, {0.0, 0.0}));  // d/dv mean(v^2) = v
  EXPECT_DOUBLE_EQ(sink[0], 11.0);
  EXPECT_DOUBLE_EQ(sink[1], 12.0);
}
