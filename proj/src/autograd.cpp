#include "cdpm/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace cdpm::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;
using CMapRow = Eigen::Map<const RowMat>;
using MapRow = Eigen::Map<RowMat>;
using CMapCol = Eigen::Map<const ColMat>;
using MapCol = Eigen::Map<ColMat>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

Graph::Id Graph::constant(Shape shape, std::vector<double> value) {
  if (numel(shape) != value.size())
    throw std::invalid_argument("Graph::constant: value size does not match " + shape_string(shape));
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Graph::Id Graph::parameter(const Shape& shape, const std::vector<double>& value,
                           std::vector<double>* grad_sink) {
  if (numel(shape) != value.size())
    throw std::invalid_argument("Graph::parameter: value size does not match " + shape_string(shape));
  Node n;
  n.shape = shape;
  n.external = &value;
  n.sink = record_ ? grad_sink : nullptr;
  n.needs_grad = n.sink != nullptr;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

std::vector<double>& Graph::grad(Id id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
  return n.grad;
}

Graph::Id Graph::add_node(Shape shape, std::vector<double> value, std::initializer_list<Id> inputs,
                          std::function<void()> backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  if (record_)
    for (Id in : inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

void Graph::backward(Id loss) {
  if (!record_) throw std::logic_error("Graph::backward: graph was built without recording");
  if (numel(nodes_[loss].shape) != 1)
    throw std::invalid_argument("Graph::backward: loss must have exactly one element");
  grad(loss)[0] = 1.0;
  for (Id i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward();
  }
  for (Node& n : nodes_) {
    if (n.sink && !n.grad.empty()) {
      if (n.sink->size() != n.grad.size())
        throw std::logic_error("Graph::backward: gradient sink has wrong size");
      for (std::size_t k = 0; k < n.grad.size(); ++k) (*n.sink)[k] += n.grad[k];
    }
  }
}

namespace ops {

namespace {

void expect(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void expect_rank(const Graph& g, Id id, std::size_t rank, const char* op) {
  expect(g.shape(id).size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                         " input, got " + shape_string(g.shape(id)));
}

// cols[(ci * k + ky) * k + kx][y * w + x] = x[ci, y + ky - pad, x + kx - pad]
void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            double* cols) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ci * k + ky) * k + kx) * hw;
        const double* src = x + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
          double* out = row + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* line = src + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
            out[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : line[sx];
          }
        }
      }
}

void col2im_add(const double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                double* dx) {
  const long pad = static_cast<long>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ci * k + ky) * k + kx) * hw;
        double* dst = dx + ci * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          double* line = dst + static_cast<std::size_t>(sy) * w;
          const double* in = row + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + static_cast<long>(kx) - pad;
            if (sx >= 0 && sx < static_cast<long>(w)) line[sx] += in[xx];
          }
        }
      }
}

}  // namespace

Id conv2d(Graph& g, Id x, Id weight, Id bias) {
  expect_rank(g, x, 4, "conv2d");
  expect_rank(g, weight, 4, "conv2d");
  const Shape xs = g.shape(x);
  const Shape ws = g.shape(weight);
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  expect(ws[1] == cin && ws[3] == k && k % 2 == 1,
         "conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
  expect(g.shape(bias) == Shape{cout}, "conv2d: bias must be [Cout]");
  const std::size_t hw = h * w;
  const std::size_t patch = cin * k * k;

  std::vector<double> y(n * cout * hw);
  std::vector<double> cols(k == 1 ? 0 : patch * hw);
  const CMapRow wm(g.value(weight).data(), static_cast<long>(cout), static_cast<long>(patch));
  const Eigen::Map<const Eigen::VectorXd> bv(g.value(bias).data(), static_cast<long>(cout));
  for (std::size_t s = 0; s < n; ++s) {
    const double* xsrc = g.value(x).data() + s * cin * hw;
    if (k != 1) im2col(xsrc, cin, h, w, k, cols.data());
    const CMapRow cm(k == 1 ? xsrc : cols.data(), static_cast<long>(patch), static_cast<long>(hw));
    MapRow ym(y.data() + s * cout * hw, static_cast<long>(cout), static_cast<long>(hw));
    ym.noalias() = wm * cm;
    ym.colwise() += bv;
  }

  const Id self = g.size();
  return g.add_node({n, cout, h, w}, std::move(y), {x, weight, bias}, [&g, self, x, weight, bias, n,
                                                                        cin, cout, h, w, k, hw, patch] {
    const std::vector<double>& gy = g.grad(self);
    const CMapRow wm(g.value(weight).data(), static_cast<long>(cout), static_cast<long>(patch));
    std::vector<double> cols(k == 1 ? 0 : patch * hw);
    std::vector<double> dcols(patch * hw);
    for (std::size_t s = 0; s < n; ++s) {
      const CMapRow dy(gy.data() + s * cout * hw, static_cast<long>(cout), static_cast<long>(hw));
      const double* xsrc = g.value(x).data() + s * cin * hw;
      if (g.needs_grad(weight)) {
        if (k != 1) im2col(xsrc, cin, h, w, k, cols.data());
        const CMapRow cm(k == 1 ? xsrc : cols.data(), static_cast<long>(patch),
                         static_cast<long>(hw));
        MapRow dw(g.grad(weight).data(), static_cast<long>(cout), static_cast<long>(patch));
        dw.noalias() += dy * cm.transpose();
      }
      if (g.needs_grad(bias)) {
        Eigen::Map<Eigen::VectorXd> db(g.grad(bias).data(), static_cast<long>(cout));
        db += dy.rowwise().sum();
      }
      if (g.needs_grad(x)) {
        double* dx = g.grad(x).data() + s * cin * hw;
        if (k == 1) {
          MapRow dxm(dx, static_cast<long>(cin), static_cast<long>(hw));
          dxm.noalias() += wm.transpose() * dy;
        } else {
          MapRow dc(dcols.data(), static_cast<long>(patch), static_cast<long>(hw));
          dc.noalias() = wm.transpose() * dy;
          col2im_add(dcols.data(), cin, h, w, k, dx);
        }
      }
    }
  });
}

Id group_norm(Graph& g, Id x, Id gamma, Id beta, std::size_t groups, double eps) {
  expect_rank(g, x, 4, "group_norm");
  const Shape xs = g.shape(x);
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  expect(groups > 0 && c % groups == 0, "group_norm: groups must divide channels");
  expect(g.shape(gamma) == Shape{c} && g.shape(beta) == Shape{c},
         "group_norm: gamma/beta must be [C]");
  const std::size_t cg = c / groups;
  const std::size_t m = cg * hw;

  auto stats = std::make_shared<std::vector<double>>(2 * n * groups);  // mean, rstd
  std::vector<double> y(n * c * hw);
  const auto& xv = g.value(x);
  const auto& gm = g.value(gamma);
  const auto& bt = g.value(beta);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (s * c + gi * cg) * hw;
      double mean = 0.0;
      for (std::size_t i = 0; i < m; ++i) mean += xv[base + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) var += (xv[base + i] - mean) * (xv[base + i] - mean);
      var /= static_cast<double>(m);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * (s * groups + gi)] = mean;
      (*stats)[2 * (s * groups + gi) + 1] = rstd;
      for (std::size_t ch = 0; ch < cg; ++ch) {
        const std::size_t cc = gi * cg + ch;
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = base + ch * hw + p;
          y[idx] = (xv[idx] - mean) * rstd * gm[cc] + bt[cc];
        }
      }
    }

  const Id self = g.size();
  return g.add_node(xs, std::move(y), {x, gamma, beta},
                    [&g, self, x, gamma, beta, n, c, hw, groups, cg, m, stats] {
    const auto& gy = g.grad(self);
    const auto& xv = g.value(x);
    const auto& gm = g.value(gamma);
    std::vector<double> dxhat(m);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (s * c + gi * cg) * hw;
        const double mean = (*stats)[2 * (s * groups + gi)];
        const double rstd = (*stats)[2 * (s * groups + gi) + 1];
        double sum_d = 0.0;
        double sum_dx = 0.0;
        for (std::size_t ch = 0; ch < cg; ++ch) {
          const std::size_t cc = gi * cg + ch;
          double dgam = 0.0;
          double dbet = 0.0;
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t i = ch * hw + p;
            const double xhat = (xv[base + i] - mean) * rstd;
            const double dy = gy[base + i];
            dgam += dy * xhat;
            dbet += dy;
            dxhat[i] = dy * gm[cc];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat;
          }
          if (g.needs_grad(gamma)) g.grad(gamma)[cc] += dgam;
          if (g.needs_grad(beta)) g.grad(beta)[cc] += dbet;
        }
        if (!g.needs_grad(x)) continue;
        auto& dx = g.grad(x);
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
          const double xhat = (xv[base + i] - mean) * rstd;
          dx[base + i] += rstd * (dxhat[i] - sum_d * inv_m - xhat * sum_dx * inv_m);
        }
      }
  });
}

Id silu(Graph& g, Id x) {
  const auto& xv = g.value(x);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  const Id self = g.size();
  return g.add_node(g.shape(x), std::move(y), {x}, [&g, self, x] {
    const auto& gy = g.grad(self);
    const auto& xv = g.value(x);
    auto& dx = g.grad(x);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-xv[i]));
      dx[i] += gy[i] * sig * (1.0 + xv[i] * (1.0 - sig));
    }
  });
}

Id add(Graph& g, Id a, Id b) {
  expect(g.shape(a) == g.shape(b), "add: shape mismatch " + shape_string(g.shape(a)) + " vs " +
                                       shape_string(g.shape(b)));
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const Id self = g.size();
  return g.add_node(g.shape(a), std::move(y), {a, b}, [&g, self, a, b] {
    const auto& gy = g.grad(self);
    for (Id in : {a, b}) {
      if (!g.needs_grad(in)) continue;
      auto& d = g.grad(in);
      for (std::size_t i = 0; i < gy.size(); ++i) d[i] += gy[i];
    }
  });
}

Id add_channel_bias(Graph& g, Id x, Id v) {
  expect_rank(g, x, 4, "add_channel_bias");
  expect_rank(g, v, 2, "add_channel_bias");
  const Shape xs = g.shape(x);
  const Shape vs = g.shape(v);
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  expect(vs[1] == c && (vs[0] == 1 || vs[0] == n),
         "add_channel_bias: bias " + shape_string(vs) + " incompatible with " + shape_string(xs));
  const bool shared = vs[0] == 1 && n != 1;
  const auto& xv = g.value(x);
  const auto& bv = g.value(v);
  std::vector<double> y(xv.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double b = bv[(shared ? 0 : s) * c + ch];
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) y[base + p] = xv[base + p] + b;
    }
  const Id self = g.size();
  return g.add_node(xs, std::move(y), {x, v}, [&g, self, x, v, n, c, hw, shared] {
    const auto& gy = g.grad(self);
    if (g.needs_grad(x)) {
      auto& dx = g.grad(x);
      for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i];
    }
    if (g.needs_grad(v)) {
      auto& dv = g.grad(v);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          const std::size_t base = (s * c + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) acc += gy[base + p];
          dv[(shared ? 0 : s) * c + ch] += acc;
        }
    }
  });
}

Id linear(Graph& g, Id x, Id weight, Id bias) {
  expect_rank(g, x, 2, "linear");
  expect_rank(g, weight, 2, "linear");
  const std::size_t n = g.shape(x)[0], in = g.shape(x)[1], out = g.shape(weight)[0];
  expect(g.shape(weight)[1] == in, "linear: weight " + shape_string(g.shape(weight)) +
                                       " incompatible with input " + shape_string(g.shape(x)));
  expect(g.shape(bias) == Shape{out}, "linear: bias must be [out]");
  std::vector<double> y(n * out);
  {
    const CMapRow xm(g.value(x).data(), static_cast<long>(n), static_cast<long>(in));
    const CMapRow wm(g.value(weight).data(), static_cast<long>(out), static_cast<long>(in));
    const Eigen::Map<const Eigen::RowVectorXd> bv(g.value(bias).data(), static_cast<long>(out));
    MapRow ym(y.data(), static_cast<long>(n), static_cast<long>(out));
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += bv;
  }
  const Id self = g.size();
  return g.add_node({n, out}, std::move(y), {x, weight, bias}, [&g, self, x, weight, bias, n, in, out] {
    const CMapRow dy(g.grad(self).data(), static_cast<long>(n), static_cast<long>(out));
    const CMapRow xm(g.value(x).data(), static_cast<long>(n), static_cast<long>(in));
    const CMapRow wm(g.value(weight).data(), static_cast<long>(out), static_cast<long>(in));
    if (g.needs_grad(weight)) {
      MapRow dw(g.grad(weight).data(), static_cast<long>(out), static_cast<long>(in));
      dw.noalias() += dy.transpose() * xm;
    }
    if (g.needs_grad(bias)) {
      Eigen::Map<Eigen::RowVectorXd> db(g.grad(bias).data(), static_cast<long>(out));
      db += dy.colwise().sum();
    }
    if (g.needs_grad(x)) {
      MapRow dx(g.grad(x).data(), static_cast<long>(n), static_cast<long>(in));
      dx.noalias() += dy * wm;
    }
  });
}

Id concat_channels(Graph& g, Id a, Id b) {
  expect_rank(g, a, 4, "concat_channels");
  expect_rank(g, b, 4, "concat_channels");
  const Shape as = g.shape(a);
  const Shape bs = g.shape(b);
  expect(as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
         "concat_channels: " + shape_string(as) + " vs " + shape_string(bs));
  const std::size_t n = as[0], ca = as[1], cb = bs[1], hw = as[2] * as[3];
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  std::vector<double> y(n * (ca + cb) * hw);
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(av.begin() + static_cast<long>(s * ca * hw), ca * hw,
                y.begin() + static_cast<long>(s * (ca + cb) * hw));
    std::copy_n(bv.begin() + static_cast<long>(s * cb * hw), cb * hw,
                y.begin() + static_cast<long>((s * (ca + cb) + ca) * hw));
  }
  const Id self = g.size();
  return g.add_node({n, ca + cb, as[2], as[3]}, std::move(y), {a, b}, [&g, self, a, b, n, ca, cb, hw] {
    const auto& gy = g.grad(self);
    for (std::size_t s = 0; s < n; ++s) {
      if (g.needs_grad(a)) {
        auto& da = g.grad(a);
        for (std::size_t i = 0; i < ca * hw; ++i) da[s * ca * hw + i] += gy[s * (ca + cb) * hw + i];
      }
      if (g.needs_grad(b)) {
        auto& db = g.grad(b);
        for (std::size_t i = 0; i < cb * hw; ++i)
          db[s * cb * hw + i] += gy[(s * (ca + cb) + ca) * hw + i];
      }
    }
  });
}

Id avg_pool2(Graph& g, Id x) {
  expect_rank(g, x, 4, "avg_pool2");
  const Shape xs = g.shape(x);
  expect(xs[2] % 2 == 0 && xs[3] % 2 == 0, "avg_pool2: spatial size must be even");
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  const auto& xv = g.value(x);
  std::vector<double> y(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* src = xv.data() + p * h * w + 2 * i * w + 2 * j;
        y[(p * oh + i) * ow + j] = 0.25 * (src[0] + src[1] + src[w] + src[w + 1]);
      }
  const Id self = g.size();
  return g.add_node({xs[0], xs[1], oh, ow}, std::move(y), {x}, [&g, self, x, planes, h, w, oh, ow] {
    const auto& gy = g.grad(self);
    auto& dx = g.grad(x);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double d = 0.25 * gy[(p * oh + i) * ow + j];
          double* dst = dx.data() + p * h * w + 2 * i * w + 2 * j;
          dst[0] += d;
          dst[1] += d;
          dst[w] += d;
          dst[w + 1] += d;
        }
  });
}

Id upsample2(Graph& g, Id x) {
  expect_rank(g, x, 4, "upsample2");
  const Shape xs = g.shape(x);
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = 2 * h, ow = 2 * w;
  const auto& xv = g.value(x);
  std::vector<double> y(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) y[(p * oh + i) * ow + j] = xv[(p * h + i / 2) * w + j / 2];
  const Id self = g.size();
  return g.add_node({xs[0], xs[1], oh, ow}, std::move(y), {x}, [&g, self, x, planes, h, w, oh, ow] {
    const auto& gy = g.grad(self);
    auto& dx = g.grad(x);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) dx[(p * h + i / 2) * w + j / 2] += gy[(p * oh + i) * ow + j];
  });
}

Id gather_rows(Graph& g, Id table, const std::vector<std::size_t>& rows) {
  expect_rank(g, table, 2, "gather_rows");
  const std::size_t r = g.shape(table)[0], e = g.shape(table)[1];
  const auto& tv = g.value(table);
  std::vector<double> y(rows.size() * e);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect(rows[i] < r, "gather_rows: row index out of range");
    std::copy_n(tv.begin() + static_cast<long>(rows[i] * e), e, y.begin() + static_cast<long>(i * e));
  }
  const Id self = g.size();
  return g.add_node({rows.size(), e}, std::move(y), {table}, [&g, self, table, rows, e] {
    const auto& gy = g.grad(self);
    auto& dt = g.grad(table);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < e; ++k) dt[rows[i] * e + k] += gy[i * e + k];
  });
}

Id select_slices(Graph& g, Id x, const std::vector<std::size_t>& positions) {
  const Shape xs = g.shape(x);
  expect(!xs.empty(), "select_slices: scalar input");
  const std::size_t per = numel(xs) / xs[0];
  const auto& xv = g.value(x);
  std::vector<double> y(positions.size() * per);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    expect(positions[i] < xs[0], "select_slices: position out of range");
    std::copy_n(xv.begin() + static_cast<long>(positions[i] * per), per,
                y.begin() + static_cast<long>(i * per));
  }
  Shape ys = xs;
  ys[0] = positions.size();
  const Id self = g.size();
  return g.add_node(ys, std::move(y), {x}, [&g, self, x, positions, per] {
    const auto& gy = g.grad(self);
    auto& dx = g.grad(x);
    for (std::size_t i = 0; i < positions.size(); ++i)
      for (std::size_t k = 0; k < per; ++k) dx[positions[i] * per + k] += gy[i * per + k];
  });
}

Id slice_attention(Graph& g, Id x, const AttentionWeights& wt, std::size_t heads) {
  expect_rank(g, x, 4, "slice_attention");
  const Shape xs = g.shape(x);
  const std::size_t n = xs[0], c = xs[1], np = xs[2] * xs[3];
  expect(heads > 0 && c % heads == 0, "slice_attention: heads must divide channels");
  for (Id wid : {wt.wq, wt.wk, wt.wv, wt.wo})
    expect(g.shape(wid) == Shape{c, c}, "slice_attention: projection must be [C, C]");
  for (Id bid : {wt.bq, wt.bk, wt.bv, wt.bo})
    expect(g.shape(bid) == Shape{c}, "slice_attention: projection bias must be [C]");
  const std::size_t dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const long P = static_cast<long>(np), C = static_cast<long>(c);

  struct Saved {
    std::vector<ColMat> q, k, v, o;  // per slice, [P, C]
    std::vector<double> attn;        // [P, heads, N, N]
  };
  auto sv = std::make_shared<Saved>();
  auto project = [&](Id w, Id b, std::vector<ColMat>& out) {
    const CMapRow wm(g.value(w).data(), C, C);
    const Eigen::Map<const Eigen::RowVectorXd> bv(g.value(b).data(), C);
    out.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
      const CMapCol xm(g.value(x).data() + s * c * np, P, C);
      out[s].noalias() = xm * wm.transpose();
      out[s].rowwise() += bv;
    }
  };
  project(wt.wq, wt.bq, sv->q);
  project(wt.wk, wt.bk, sv->k);
  project(wt.wv, wt.bv, sv->v);

  sv->attn.assign(np * heads * n * n, 0.0);
  sv->o.assign(n, ColMat::Zero(P, C));
  std::vector<double> row(n);
  for (std::size_t p = 0; p < np; ++p)
    for (std::size_t hh = 0; hh < heads; ++hh) {
      double* a = sv->attn.data() + (p * heads + hh) * n * n;
      const long c0 = static_cast<long>(hh * dh);
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (long d = 0; d < static_cast<long>(dh); ++d)
            dot += sv->q[i](static_cast<long>(p), c0 + d) * sv->k[j](static_cast<long>(p), c0 + d);
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] = row[j] / total;
        for (long d = 0; d < static_cast<long>(dh); ++d) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += a[i * n + j] * sv->v[j](static_cast<long>(p), c0 + d);
          sv->o[i](static_cast<long>(p), c0 + d) = acc;
        }
      }
    }

  std::vector<double> y(n * c * np);
  {
    const CMapRow wo(g.value(wt.wo).data(), C, C);
    const Eigen::Map<const Eigen::RowVectorXd> bo(g.value(wt.bo).data(), C);
    for (std::size_t s = 0; s < n; ++s) {
      MapCol ym(y.data() + s * c * np, P, C);
      ym.noalias() = sv->o[s] * wo.transpose();
      ym.rowwise() += bo;
    }
  }

  const Id self = g.size();
  return g.add_node(xs, std::move(y), {x, wt.wq, wt.bq, wt.wk, wt.bk, wt.wv, wt.bv, wt.wo, wt.bo},
                    [&g, self, x, wt, sv, n, c, np, heads, dh, scale, P, C] {
    const auto& gy = g.grad(self);
    const CMapRow wo(g.value(wt.wo).data(), C, C);
    std::vector<ColMat> d_o(n);
    for (std::size_t s = 0; s < n; ++s) {
      const CMapCol dy(gy.data() + s * c * np, P, C);
      if (g.needs_grad(wt.wo)) {
        MapRow dwo(g.grad(wt.wo).data(), C, C);
        dwo.noalias() += dy.transpose() * sv->o[s];
      }
      if (g.needs_grad(wt.bo)) {
        Eigen::Map<Eigen::RowVectorXd> dbo(g.grad(wt.bo).data(), C);
        dbo += dy.colwise().sum();
      }
      d_o[s].noalias() = dy * wo;
    }

    std::vector<ColMat> dq(n, ColMat::Zero(P, C)), dk(n, ColMat::Zero(P, C)),
        dv(n, ColMat::Zero(P, C));
    std::vector<double> da(n * n), ds(n * n);
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const double* a = sv->attn.data() + (p * heads + hh) * n * n;
        const long c0 = static_cast<long>(hh * dh);
        const long pp = static_cast<long>(p);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (long d = 0; d < static_cast<long>(dh); ++d) {
              acc += d_o[i](pp, c0 + d) * sv->v[j](pp, c0 + d);
              dv[j](pp, c0 + d) += a[i * n + j] * d_o[i](pp, c0 + d);
            }
            da[i * n + j] = acc;
          }
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += a[i * n + j] * da[i * n + j];
          for (std::size_t j = 0; j < n; ++j) ds[i * n + j] = a[i * n + j] * (da[i * n + j] - dot);
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double sij = ds[i * n + j] * scale;
            for (long d = 0; d < static_cast<long>(dh); ++d) {
              dq[i](pp, c0 + d) += sij * sv->k[j](pp, c0 + d);
              dk[j](pp, c0 + d) += sij * sv->q[i](pp, c0 + d);
            }
          }
      }

    auto back_project = [&](Id w, Id b, const std::vector<ColMat>& dproj) {
      const CMapRow wm(g.value(w).data(), C, C);
      for (std::size_t s = 0; s < n; ++s) {
        const CMapCol xm(g.value(x).data() + s * c * np, P, C);
        if (g.needs_grad(w)) {
          MapRow dw(g.grad(w).data(), C, C);
          dw.noalias() += dproj[s].transpose() * xm;
        }
        if (g.needs_grad(b)) {
          Eigen::Map<Eigen::RowVectorXd> db(g.grad(b).data(), C);
          db += dproj[s].colwise().sum();
        }
        if (g.needs_grad(x)) {
          MapCol dx(g.grad(x).data() + s * c * np, P, C);
          dx.noalias() += dproj[s] * wm;
        }
      }
    };
    back_project(wt.wq, wt.bq, dq);
    back_project(wt.wk, wt.bk, dk);
    back_project(wt.wv, wt.bv, dv);
  });
}

Id mse(Graph& g, Id pred, const std::vector<double>& target) {
  const auto& pv = g.value(pred);
  expect(pv.size() == target.size() && !target.empty(),
         "mse: prediction and target sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - target[i]) * (pv[i] - target[i]);
  const double inv = 1.0 / static_cast<double>(pv.size());
  const Id self = g.size();
  return g.add_node({1}, {acc * inv}, {pred}, [&g, self, pred, target, inv] {
    const double gl = g.grad(self)[0];
    const auto& pv = g.value(pred);
    auto& dp = g.grad(pred);
    for (std::size_t i = 0; i < pv.size(); ++i) dp[i] += gl * 2.0 * (pv[i] - target[i]) * inv;
  });
}

}  // namespace ops
}  // namespace cdpm::nn
