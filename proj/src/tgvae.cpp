#include "sigs/tgvae.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <sstream>

#include "sigs/error.hpp"
#include "sigs/util.hpp"

namespace sigs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Parameters

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  ModelParams p;
  p.cfg = cfg;
  const int D = cfg.input_dim(), H = cfg.hidden, Z = cfg.latent;
  p.W1 = MatrixXd::Zero(H, D);
  p.b1 = MatrixXd::Zero(H, 1);
  p.Wmu = MatrixXd::Zero(Z, H);
  p.Wlv = MatrixXd::Zero(Z, H);
  p.W2 = MatrixXd::Zero(H, Z);
  p.b2 = MatrixXd::Zero(H, 1);
  p.W3 = MatrixXd::Zero(D, H);
  p.b3 = MatrixXd::Zero(D, 1);
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros(cfg);
  std::mt19937_64 rng(seed);
  // Glorot-style scale; the one-hot input has L_max active entries so the
  // fan-in of W1 is L_max rather than C*L_max.
  auto fill = [&](MatrixXd& w, double fan_in, double fan_out) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (fan_in + fan_out)));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  };
  fill(p.W1, cfg.max_len, cfg.hidden);
  fill(p.Wmu, cfg.hidden, cfg.latent);
  fill(p.Wlv, cfg.hidden, cfg.latent);
  p.Wlv *= 0.1;  // start near unit posterior variance
  fill(p.W2, cfg.latent, cfg.hidden);
  fill(p.W3, cfg.hidden, cfg.rules);
  return p;
}

std::array<MatrixXd*, 8> ModelParams::tensors() { return {&W1, &b1, &Wmu, &Wlv, &W2, &b2, &W3, &b3}; }
std::array<const MatrixXd*, 8> ModelParams::tensors() const { return {&W1, &b1, &Wmu, &Wlv, &W2, &b2, &W3, &b3}; }

std::size_t ModelParams::num_params() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += static_cast<std::size_t>(t->size());
  return n;
}

void ModelParams::set_zero() {
  for (auto* t : tensors()) t->setZero();
}

// ---------------------------------------------------------------------------
// Forward maps

namespace {

void check_seq(std::span<const int> seq, const ModelConfig& cfg) {
  if (static_cast<int>(seq.size()) != cfg.max_len)
    throw Error(ErrorCode::ShapeMismatch, fmt::format("sequence length {} != {}", seq.size(), cfg.max_len));
  for (int r : seq)
    if (r < 0 || r >= cfg.rules) throw Error(ErrorCode::ShapeMismatch, fmt::format("rule index {} out of range", r));
}

VectorXd hidden_pre(std::span<const int> seq, const ModelParams& p) {
  VectorXd h = p.b1.col(0);
  const int C = p.cfg.rules;
  for (int pos = 0; pos < p.cfg.max_len; ++pos) h += p.W1.col(pos * C + seq[pos]);
  return h;
}

}  // namespace

Encoding encode(std::span<const int> seq, const ModelParams& p) {
  check_seq(seq, p.cfg);
  VectorXd a = hidden_pre(seq, p).array().tanh();
  return {p.Wmu * a, p.Wlv * a};
}

Encoding encode(const OneHotMatrix& x, const ModelParams& p) {
  if (x.rows != p.cfg.rules || x.cols != p.cfg.max_len)
    throw Error(ErrorCode::ShapeMismatch, "one-hot matrix does not match the model");
  RuleSequence seq = decode_onehot(x);
  return encode(seq, p);
}

VectorXd reparameterize(const VectorXd& mu, const VectorXd& logvar, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  VectorXd z(mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) z[i] = mu[i] + std::exp(0.5 * logvar[i]) * n(rng);
  return z;
}

VectorXd decode_logits(const VectorXd& z, const ModelParams& p) {
  if (z.size() != p.cfg.latent) throw Error(ErrorCode::ShapeMismatch, "latent size mismatch");
  VectorXd a = (p.W2 * z + p.b2.col(0)).array().tanh();
  return p.W3 * a + p.b3.col(0);
}

DecodeResult decode(const VectorXd& z, const ModelParams& p, const Grammar& g) {
  VectorXd logits = decode_logits(z, p);
  return masked_argmax_decode(std::span<const double>(logits.data(), logits.size()), g);
}

// ---------------------------------------------------------------------------
// Losses and schedules

double loss_recon(std::span<const double> logits, std::span<const int> target, int rules, std::span<double> dlogits) {
  const std::size_t L = target.size();
  if (logits.size() != L * static_cast<std::size_t>(rules))
    throw Error(ErrorCode::ShapeMismatch, "logits do not match the target length");
  if (!dlogits.empty() && dlogits.size() != logits.size())
    throw Error(ErrorCode::ShapeMismatch, "gradient buffer size mismatch");
  double total = 0;
  for (std::size_t pos = 0; pos < L; ++pos) {
    const double* l = logits.data() + pos * rules;
    double m = *std::max_element(l, l + rules);
    double s = 0;
    for (int r = 0; r < rules; ++r) s += std::exp(l[r] - m);
    double lse = m + std::log(s);
    total += lse - l[target[pos]];
    if (!dlogits.empty()) {
      double* d = dlogits.data() + pos * rules;
      for (int r = 0; r < rules; ++r) d[r] = std::exp(l[r] - lse) / static_cast<double>(L);
      d[target[pos]] -= 1.0 / static_cast<double>(L);
    }
  }
  return total / static_cast<double>(L);
}

double loss_kl(const VectorXd& mu, const VectorXd& logvar) {
  double s = 0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) s += 1 + logvar[i] - mu[i] * mu[i] - std::exp(logvar[i]);
  return -0.5 * s;
}

double beta_schedule(long step, double beta0, long warmup) {
  if (warmup <= 0) return 1.0;
  double f = std::min(static_cast<double>(step) / static_cast<double>(warmup), 1.0);
  return beta0 + (1 - beta0) * std::max(f, 0.0);
}

double gamma_schedule(double epoch, std::optional<double> activation_epoch, double ramp) {
  if (!activation_epoch || epoch < *activation_epoch) return 0.0;
  if (ramp <= 0) return 1.0;
  return std::min((epoch - *activation_epoch) / ramp, 1.0);
}

MatrixXd random_directions(int dim, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd d(dim, k);
  for (int j = 0; j < k; ++j) {
    do {
      for (int i = 0; i < dim; ++i) d(i, j) = n(rng);
    } while (d.col(j).norm() < 1e-12);
    d.col(j).normalize();
  }
  return d;
}

double hull_loss(const MatrixXd& reservoir, const MatrixXd& batch, const MatrixXd& directions, MatrixXd* grad) {
  if (reservoir.cols() == 0) throw Error(ErrorCode::EmptyReservoir, "hull loss needs a nonempty reservoir");
  if (reservoir.rows() != batch.rows() || directions.rows() != batch.rows())
    throw Error(ErrorCode::ShapeMismatch, "hull loss dimension mismatch");
  const Eigen::Index B = batch.cols(), K = directions.cols();
  if (grad) *grad = MatrixXd::Zero(batch.rows(), B);
  if (B == 0 || K == 0) return 0.0;
  VectorXd support = (directions.transpose() * reservoir).rowwise().maxCoeff();
  MatrixXd proj = directions.transpose() * batch;  // K x B
  const double norm = 1.0 / static_cast<double>(B * K);
  double total = 0;
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index k = 0; k < K; ++k) {
      double excess = proj(k, i) - support[k];
      if (excess <= 0) continue;
      total += excess * excess;
      if (grad) grad->col(i) += 2 * norm * excess * directions.col(k);
    }
  return total * norm;
}

int Reservoir::update(const MatrixXd& batch) {
  int added = 0;
  for (Eigen::Index i = 0; i < batch.cols(); ++i) {
    bool far = true;
    for (Eigen::Index j = 0; j < points_.cols() && far; ++j)
      if ((points_.col(j) - batch.col(i)).norm() < delta_) far = false;
    // with delta = 0 exact repeats are still skipped
    if (far && delta_ == 0)
      for (Eigen::Index j = 0; j < points_.cols() && far; ++j)
        if (points_.col(j) == batch.col(i)) far = false;
    if (!far) continue;
    if (points_.cols() == 0) points_.resize(batch.rows(), 0);
    points_.conservativeResize(Eigen::NoChange, points_.cols() + 1);
    points_.col(points_.cols() - 1) = batch.col(i);
    ++added;
  }
  return added;
}

// ---------------------------------------------------------------------------
// Vietoris-Rips persistence, dimensions 0 and 1

namespace {

struct Edge {
  int u, v;
  double len;
};

int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) x = parent[x] = parent[parent[x]];
  return x;
}

}  // namespace

Persistence rips_persistence(const MatrixXd& pts) {
  Persistence out;
  const int n = static_cast<int>(pts.cols());
  if (n < 2) return out;

  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) edges.push_back({i, j, (pts.col(i) - pts.col(j)).norm()});
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.len < b.len; });
  const int m = static_cast<int>(edges.size());
  std::vector<int> rank_of(n * n, -1);  // vertex pair -> filtration rank
  for (int e = 0; e < m; ++e) rank_of[edges[e].u * n + edges[e].v] = rank_of[edges[e].v * n + edges[e].u] = e;

  // H0: Kruskal merges; every component but one dies at an MST edge
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& e : edges) {
    int a = find_root(parent, e.u), b = find_root(parent, e.v);
    if (a == b) continue;
    parent[std::max(a, b)] = std::min(a, b);
    out.h0.push_back({0.0, e.len, {-1, -1}, {e.u, e.v}});
  }

  // H1: reduce triangle boundaries over edges, triangles ordered by
  // (diameter, edge ranks descending)
  struct Tri {
    std::array<int, 3> ranks;  // descending
  };
  std::vector<Tri> tris;
  tris.reserve(static_cast<std::size_t>(n) * (n - 1) * (n - 2) / 6);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      for (int k = j + 1; k < n; ++k) {
        std::array<int, 3> r{rank_of[i * n + j], rank_of[i * n + k], rank_of[j * n + k]};
        std::sort(r.begin(), r.end(), std::greater<>());
        tris.push_back({r});
      }
  std::sort(tris.begin(), tris.end(), [](const Tri& a, const Tri& b) { return a.ranks < b.ranks; });

  std::vector<int> pivot_col(m, -1);
  std::vector<std::vector<int>> cols(tris.size());  // descending edge ranks
  for (std::size_t c = 0; c < tris.size(); ++c) {
    std::vector<int> col(tris[c].ranks.begin(), tris[c].ranks.end());
    while (!col.empty() && pivot_col[col.front()] != -1) {
      const auto& other = cols[pivot_col[col.front()]];
      std::vector<int> sym;
      sym.reserve(col.size() + other.size());
      std::set_symmetric_difference(col.begin(), col.end(), other.begin(), other.end(), std::back_inserter(sym),
                                    std::greater<>());
      col.swap(sym);
    }
    if (col.empty()) continue;
    int low = col.front();
    pivot_col[low] = static_cast<int>(c);
    const Edge& born = edges[low];
    const Edge& killer = edges[tris[c].ranks[0]];
    if (killer.len > born.len) out.h1.push_back({born.len, killer.len, {born.u, born.v}, {killer.u, killer.v}});
    cols[c] = std::move(col);
  }
  return out;
}

PhLoss ph_loss(const MatrixXd& pts, double r, double a0, MatrixXd* grad) {
  PhLoss out;
  if (grad && (grad->rows() != pts.rows() || grad->cols() != pts.cols())) *grad = MatrixXd::Zero(pts.rows(), pts.cols());
  if (pts.cols() < 2) return out;
  Persistence pd = rips_persistence(pts);
  auto edge_grad = [&](const std::array<int, 2>& e, double weight) {
    if (!grad || weight == 0.0) return;
    VectorXd diff = pts.col(e[0]) - pts.col(e[1]);
    double len = diff.norm();
    if (len == 0.0) return;
    grad->col(e[0]) += weight * diff / len;
    grad->col(e[1]) -= weight * diff / len;
  };
  for (const auto& p : pd.h0) {
    double l = std::max(0.0, std::min(p.death, r) - std::min(p.birth, r));
    out.h0 += a0 * l * l;
    if (l > 0 && p.death < r) edge_grad(p.death_edge, 2 * a0 * l);
  }
  for (const auto& p : pd.h1) {
    double l = std::max(0.0, std::min(p.death, r) - std::min(p.birth, r));
    out.h1 += l * l;
    if (l <= 0) continue;
    if (p.death < r) edge_grad(p.death_edge, 2 * l);
    if (p.birth < r) edge_grad(p.birth_edge, -2 * l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Smoothness

double smoothness_estimate(const std::function<VectorXd(const VectorXd&)>& grad_f, const MatrixXd& zs,
                           const MatrixXd& probes, double h) {
  if (zs.cols() == 0 || probes.cols() == 0) return 0.0;
  double total = 0;
  for (Eigen::Index i = 0; i < zs.cols(); ++i) {
    VectorXd v = probes.col(i % probes.cols());
    VectorXd hv = (grad_f(zs.col(i) + h * v) - grad_f(zs.col(i) - h * v)) / (2 * h);
    total += hv.squaredNorm();
  }
  return total / static_cast<double>(zs.cols());
}

double smoothness_loss(const ModelParams& p, const MatrixXd& zs, const MatrixXd& probes, double h, ModelParams* grad) {
  if (zs.cols() == 0 || probes.cols() == 0) return 0.0;
  // f(z) = 1^T (W3 tanh(W2 z + b2) + b3) = a^T tanh(u) + const, a = W3^T 1
  VectorXd a = p.W3.colwise().sum().transpose();
  VectorXd abar_sum = VectorXd::Zero(a.size());
  const double n = static_cast<double>(zs.cols());
  double total = 0;
  for (Eigen::Index i = 0; i < zs.cols(); ++i) {
    VectorXd v = probes.col(i % probes.cols());
    std::array<VectorXd, 2> zz{zs.col(i) + h * v, zs.col(i) - h * v};
    std::array<VectorXd, 2> th, s, g;
    for (int k = 0; k < 2; ++k) {
      th[k] = (p.W2 * zz[k] + p.b2.col(0)).array().tanh();
      s[k] = 1.0 - th[k].array().square();
      g[k] = p.W2.transpose() * a.cwiseProduct(s[k]);
    }
    VectorXd q = (g[0] - g[1]) / (2 * h);
    total += q.squaredNorm();
    if (!grad) continue;
    for (int k = 0; k < 2; ++k) {
      VectorXd gbar = (k == 0 ? 1.0 : -1.0) * q / h / n;
      VectorXd m = a.cwiseProduct(s[k]);
      grad->W2 += m * gbar.transpose();
      VectorXd mbar = p.W2 * gbar;
      abar_sum += mbar.cwiseProduct(s[k]);
      VectorXd ubar = mbar.cwiseProduct(a).cwiseProduct(-2.0 * th[k].cwiseProduct(s[k]));
      grad->W2 += ubar * zz[k].transpose();
      grad->b2.col(0) += ubar;
    }
  }
  if (grad) grad->W3.rowwise() += abar_sum.transpose();
  return total / n;
}

// ---------------------------------------------------------------------------
// Batch objective

BatchTerms batch_objective(const ModelParams& p, const std::vector<const RuleSequence*>& batch, const MatrixXd& eps,
                           double beta, double gamma, const TopoContext* topo, ModelParams* grad,
                           double recon_scale) {
  const int B = static_cast<int>(batch.size());
  const int C = p.cfg.rules, L = p.cfg.max_len, Z = p.cfg.latent;
  if (eps.rows() != Z || eps.cols() != B) throw Error(ErrorCode::ShapeMismatch, "noise matrix shape mismatch");
  BatchTerms terms;
  if (grad) {
    if (grad->W1.rows() != p.W1.rows() || grad->W1.cols() != p.W1.cols()) *grad = ModelParams::zeros(p.cfg);
    grad->set_zero();
  }
  if (B == 0) return terms;

  MatrixXd pre1(p.cfg.hidden, B);
  for (int b = 0; b < B; ++b) {
    check_seq(*batch[b], p.cfg);
    pre1.col(b) = hidden_pre(*batch[b], p);
  }
  MatrixXd a1 = pre1.array().tanh();
  MatrixXd mu = p.Wmu * a1, lv = p.Wlv * a1;
  MatrixXd sd = (0.5 * lv.array()).exp();
  MatrixXd z = mu + sd.cwiseProduct(eps);
  MatrixXd a2 = ((p.W2 * z).colwise() + p.b2.col(0)).array().tanh();
  MatrixXd logits = (p.W3 * a2).colwise() + p.b3.col(0);

  MatrixXd dlogits(logits.rows(), B);
  for (int b = 0; b < B; ++b) {
    terms.ce += loss_recon(std::span<const double>(logits.col(b).data(), logits.rows()), *batch[b], C,
                           std::span<double>(dlogits.col(b).data(), dlogits.rows()));
    terms.kl += loss_kl(mu.col(b), lv.col(b));
  }
  terms.ce /= B;
  terms.kl /= B;
  dlogits *= recon_scale / B;

  MatrixXd dmu = MatrixXd::Zero(Z, B), dlv = MatrixXd::Zero(Z, B);
  if (gamma > 0 && topo) {
    if (topo->reservoir && topo->reservoir->cols() > 0 && topo->directions) {
      MatrixXd gh;
      terms.hull = hull_loss(*topo->reservoir, mu, *topo->directions, grad ? &gh : nullptr);
      if (grad) dmu += gamma * topo->w_hull * gh;
    }
    if (topo->ph_subset.size() >= 2) {
      MatrixXd sub(Z, topo->ph_subset.size());
      for (std::size_t i = 0; i < topo->ph_subset.size(); ++i) sub.col(i) = mu.col(topo->ph_subset[i]);
      MatrixXd gp = MatrixXd::Zero(Z, sub.cols());
      for (double r : topo->radii) terms.ph += ph_loss(sub, r, topo->a0, grad ? &gp : nullptr).total();
      if (grad)
        for (std::size_t i = 0; i < topo->ph_subset.size(); ++i)
          dmu.col(topo->ph_subset[i]) += gamma * topo->w_ph * gp.col(i);
    }
    if (topo->w_smooth > 0 && topo->probes.cols() > 0) {
      ModelParams gs;
      if (grad) gs = ModelParams::zeros(p.cfg);
      terms.smooth = smoothness_loss(p, z, topo->probes, 1e-3, grad ? &gs : nullptr);
      if (grad) {
        double w = gamma * topo->w_smooth;
        grad->W2 += w * gs.W2;
        grad->b2 += w * gs.b2;
        grad->W3 += w * gs.W3;
      }
    }
  }
  terms.total = recon_scale * terms.ce + beta * terms.kl;
  if (topo) terms.total += gamma * (topo->w_hull * terms.hull + topo->w_ph * terms.ph + topo->w_smooth * terms.smooth);
  if (!grad) return terms;

  grad->W3 = dlogits * a2.transpose() + grad->W3;
  grad->b3.col(0) += dlogits.rowwise().sum();
  MatrixXd dpre2 = (p.W3.transpose() * dlogits).cwiseProduct((1.0 - a2.array().square()).matrix());
  grad->W2 += dpre2 * z.transpose();
  grad->b2.col(0) += dpre2.rowwise().sum();
  MatrixXd dz = p.W2.transpose() * dpre2;

  dmu += dz + (beta / B) * mu;
  dlv += dz.cwiseProduct(eps).cwiseProduct(0.5 * sd) + (beta / B) * 0.5 * (lv.array().exp() - 1.0).matrix();

  grad->Wmu = dmu * a1.transpose();
  grad->Wlv = dlv * a1.transpose();
  MatrixXd dpre1 = (p.Wmu.transpose() * dmu + p.Wlv.transpose() * dlv).cwiseProduct((1.0 - a1.array().square()).matrix());
  grad->b1.col(0) = dpre1.rowwise().sum();
  for (int b = 0; b < B; ++b)
    for (int pos = 0; pos < L; ++pos) grad->W1.col(pos * C + (*batch[b])[pos]) += dpre1.col(b);
  return terms;
}

// ---------------------------------------------------------------------------
// Training

void split_dataset(std::size_t n, std::uint64_t seed, std::vector<int>& train_idx, std::vector<int>& val_idx,
                   std::vector<int>& test_idx) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  std::size_t n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  n_val = std::min(n_val, n - n_train);
  train_idx.assign(idx.begin(), idx.begin() + n_train);
  val_idx.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  test_idx.assign(idx.begin() + n_train + n_val, idx.end());
}

double seq_exact_accuracy(const std::vector<RuleSequence>& data, const std::vector<int>& idx, const ModelParams& p,
                          const Grammar& g) {
  if (idx.empty()) return 0.0;
  int hits = 0;
  for (int i : idx) {
    auto enc = encode(data[i], p);
    auto dec = decode(enc.mu, p, g);
    if (dec.finished && dec.seq == data[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

namespace {

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;
  ModelParams m, v;

  explicit AdamW(const ModelConfig& cfg) : m(ModelParams::zeros(cfg)), v(ModelParams::zeros(cfg)) {}

  void step(ModelParams& p, const ModelParams& g, double lr, double wd) {
    ++t;
    double c1 = 1 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1 - std::pow(beta2, static_cast<double>(t));
    auto pt = p.tensors();
    auto gt = g.tensors();
    auto mt = m.tensors();
    auto vt = v.tensors();
    for (std::size_t k = 0; k < pt.size(); ++k) {
      *mt[k] = beta1 * *mt[k] + (1 - beta1) * *gt[k];
      *vt[k] = beta2 * *vt[k] + (1 - beta2) * gt[k]->cwiseProduct(*gt[k]);
      *pt[k] *= 1 - lr * wd;
      pt[k]->array() -= lr * (mt[k]->array() / c1) / ((vt[k]->array() / c2).sqrt() + eps);
    }
  }
};

double grad_norm(const ModelParams& g) {
  double s = 0;
  for (const auto* t : g.tensors()) s += t->squaredNorm();
  return std::sqrt(s);
}

// Validation objective: recon at the mean plus beta-weighted KL.
double validation_elbo(const std::vector<RuleSequence>& data, const std::vector<int>& idx, const ModelParams& p,
                       double beta, double recon_scale) {
  if (idx.empty()) return 0.0;
  double total = 0;
  for (int i : idx) {
    auto enc = encode(data[i], p);
    VectorXd logits = decode_logits(enc.mu, p);
    total += recon_scale * loss_recon(std::span<const double>(logits.data(), logits.size()), data[i], p.cfg.rules) +
             beta * loss_kl(enc.mu, enc.logvar);
  }
  return total / static_cast<double>(idx.size());
}

}  // namespace

TrainResult train(const std::vector<RuleSequence>& data, const Grammar& g, const TrainConfig& cfg,
                  std::uint64_t split_seed) {
  if (data.empty()) throw Error(ErrorCode::InvalidConfig, "empty training corpus");
  if (cfg.batch < 1 || cfg.epochs < 0 || cfg.topo_every < 1 || cfg.val_topo_every < 1 || !(cfg.lr > 0) ||
      cfg.hull_directions < 1 || cfg.ph_max_points < 2 || cfg.delta < 0)
    throw Error(ErrorCode::InvalidConfig, "training configuration out of range");
  ModelConfig mc{g.rule_count(), g.max_len(), cfg.hidden, cfg.latent};
  for (const auto& s : data) check_seq(s, mc);

  TrainResult res;
  split_dataset(data.size(), split_seed, res.train_idx, res.val_idx, res.test_idx);
  const std::vector<int>& val_set = res.val_idx.empty() ? res.train_idx : res.val_idx;

  ModelParams p = ModelParams::init(mc, cfg.seed);
  ModelParams grad = ModelParams::zeros(mc);
  AdamW opt(mc);
  std::mt19937_64 rng(cfg.seed ^ 0x5eedull);
  std::normal_distribution<double> normal(0.0, 1.0);

  MatrixXd directions = random_directions(mc.latent, cfg.hull_directions, cfg.seed + 1);
  Reservoir reservoir(cfg.delta);
  std::vector<double> radii = cfg.ph_radii;
  if (radii.empty()) radii.push_back(std::sqrt(2.0) * cfg.delta);

  const double recon_scale = cfg.recon_scale > 0 ? cfg.recon_scale : mc.max_len;
  double lr = cfg.lr;
  double plateau_best = std::numeric_limits<double>::infinity();
  int plateau_bad = 0;
  double stop_best = std::numeric_limits<double>::infinity();
  int stop_bad = 0;
  ModelParams best = p;
  std::optional<double> activation;
  double last_val_acc = 0;
  long step = 0;

  std::vector<int> order = res.train_idx;
  const int steps_per_epoch = static_cast<int>((order.size() + cfg.batch - 1) / cfg.batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<const RuleSequence*> batch;
      for (std::size_t i = static_cast<std::size_t>(s) * cfg.batch;
           i < std::min(order.size(), static_cast<std::size_t>(s + 1) * cfg.batch); ++i)
        batch.push_back(&data[order[i]]);
      const int B = static_cast<int>(batch.size());
      MatrixXd eps(mc.latent, B);
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);

      double beta = beta_schedule(step, cfg.beta0, cfg.warmup);
      double gamma = cfg.topo ? gamma_schedule(epoch + static_cast<double>(s) / steps_per_epoch, activation,
                                               cfg.ramp_epochs)
                              : 0.0;
      bool topo_step = cfg.topo && gamma > 0 && step % cfg.topo_every == 0;

      TopoContext ctx;
      MatrixXd frozen = reservoir.points();
      if (topo_step) {
        ctx.reservoir = &frozen;
        ctx.directions = &directions;
        ctx.radii = radii;
        ctx.a0 = cfg.ph_a0;
        ctx.w_hull = cfg.w_hull;
        ctx.w_ph = cfg.w_ph;
        ctx.w_smooth = cfg.w_smooth;
        ctx.probes.resize(mc.latent, std::max(1, cfg.smooth_probes));
        for (Eigen::Index i = 0; i < ctx.probes.size(); ++i) ctx.probes.data()[i] = normal(rng);
        std::vector<int> all(B);
        std::iota(all.begin(), all.end(), 0);
        if (B > cfg.ph_max_points) {
          std::shuffle(all.begin(), all.end(), rng);
          all.resize(cfg.ph_max_points);
        }
        ctx.ph_subset = all;
      }
      BatchTerms t = batch_objective(p, batch, eps, beta, gamma, topo_step ? &ctx : nullptr, &grad, recon_scale);
      if (!std::isfinite(t.total))
        throw Error(ErrorCode::NonFiniteLoss,
                    fmt::format("non-finite loss at step {} (ce={}, kl={}, hull={}, ph={}, smooth={})", step, t.ce,
                                t.kl, t.hull, t.ph, t.smooth));
      double gn = grad_norm(grad);
      if (cfg.clip_norm > 0 && gn > cfg.clip_norm)
        for (auto* tt : grad.tensors()) *tt *= cfg.clip_norm / gn;
      opt.step(p, grad, lr, cfg.weight_decay);

      if (cfg.topo) {
        // reservoir sees the means of every batch (detached)
        MatrixXd mus(mc.latent, B);
        for (int b = 0; b < B; ++b) mus.col(b) = encode(*batch[b], p).mu;
        reservoir.update(mus);
      }
      epoch_total += t.total * B;
      res.log.push_back({step, epoch, t.ce, t.kl, beta, gamma, t.hull, t.ph, t.smooth, last_val_acc, lr});
      ++step;
    }
    res.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));

    double beta_now = beta_schedule(step, cfg.beta0, cfg.warmup);
    double val = validation_elbo(data, val_set, p, beta_now, recon_scale);
    last_val_acc = seq_exact_accuracy(data, val_set, p, g);
    res.val_acc.push_back(last_val_acc);
    if (!res.log.empty()) res.log.back().val_acc = last_val_acc;
    ++res.epochs_run;

    if (cfg.topo && !activation && last_val_acc >= cfg.activation_acc) {
      activation = epoch + 1.0;
      res.activation_epoch = epoch + 1;
      plateau_best = std::numeric_limits<double>::infinity();
      plateau_bad = 0;
    }
    if (val < plateau_best * (1 - 1e-4)) {
      plateau_best = val;
      plateau_bad = 0;
    } else if (++plateau_bad > cfg.plateau_patience) {
      lr *= cfg.plateau_factor;
      plateau_bad = 0;
    }
    if (val < stop_best) {
      stop_best = val;
      stop_bad = 0;
      best = p;
    } else if (++stop_bad >= cfg.patience) {
      break;
    }
  }
  res.best_val_elbo = stop_best;
  res.params = std::move(best);
  return res;
}

std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,epoch,ce,kl,beta,gamma,hull,ph,smooth,val_acc,lr\n";
  for (const auto& r : log)
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", r.step, r.epoch, r.ce, r.kl, r.beta, r.gamma, r.hull, r.ph,
                       r.smooth, r.val_acc, r.lr);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr const char* kMagic = "SIGS-CHECKPOINT 1\n";
}

void save_checkpoint(const std::string& path, const ModelParams& p, const Grammar& g) {
  nlohmann::json header;
  header["rules"] = p.cfg.rules;
  header["max_len"] = p.cfg.max_len;
  header["hidden"] = p.cfg.hidden;
  header["latent"] = p.cfg.latent;
  header["grammar_hash"] = g.hash();
  header["layout"] = "row-major float64 little-endian";
  auto ts = p.tensors();
  for (std::size_t k = 0; k < ts.size(); ++k)
    header["tensors"].push_back({{"name", ModelParams::kNames[k]}, {"rows", ts[k]->rows()}, {"cols", ts[k]->cols()}});
  std::string h = header.dump();
  std::string out = kMagic;
  out += std::to_string(h.size()) + "\n" + h;
  for (const auto* t : ts) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = *t;
    out.append(reinterpret_cast<const char*>(rm.data()), static_cast<std::size_t>(rm.size()) * sizeof(double));
  }
  write_file_atomic(path, out);
}

ModelParams load_checkpoint(const std::string& path, const Grammar& g) {
  std::string data = read_file(path);
  const std::size_t magic_len = std::strlen(kMagic);
  if (data.compare(0, magic_len, kMagic) != 0) throw Error(ErrorCode::InvalidCheckpoint, "not a checkpoint: " + path);
  std::size_t nl = data.find('\n', magic_len);
  if (nl == std::string::npos) throw Error(ErrorCode::InvalidCheckpoint, "truncated checkpoint header");
  std::size_t hlen = 0;
  try {
    hlen = std::stoull(data.substr(magic_len, nl - magic_len));
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidCheckpoint, "bad checkpoint header length");
  }
  if (nl + 1 + hlen > data.size()) throw Error(ErrorCode::InvalidCheckpoint, "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(nl + 1, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidCheckpoint, std::string("checkpoint header: ") + e.what());
  }
  if (header.value("grammar_hash", "") != g.hash())
    throw Error(ErrorCode::GrammarMismatch, "checkpoint was trained against a different grammar");
  ModelConfig mc{header.at("rules").get<int>(), header.at("max_len").get<int>(), header.at("hidden").get<int>(),
                 header.at("latent").get<int>()};
  if (mc.rules != g.rule_count() || mc.max_len != g.max_len())
    throw Error(ErrorCode::GrammarMismatch, "checkpoint shape does not match the grammar");
  ModelParams p = ModelParams::zeros(mc);
  std::size_t off = nl + 1 + hlen;
  auto ts = p.tensors();
  const auto& specs = header.at("tensors");
  if (specs.size() != ts.size()) throw Error(ErrorCode::InvalidCheckpoint, "unexpected tensor count");
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (specs[k].at("rows").get<Eigen::Index>() != ts[k]->rows() ||
        specs[k].at("cols").get<Eigen::Index>() != ts[k]->cols())
      throw Error(ErrorCode::InvalidCheckpoint, fmt::format("tensor {} has the wrong shape", ModelParams::kNames[k]));
    std::size_t bytes = static_cast<std::size_t>(ts[k]->size()) * sizeof(double);
    if (off + bytes > data.size()) throw Error(ErrorCode::InvalidCheckpoint, "truncated checkpoint body");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(ts[k]->rows(), ts[k]->cols());
    std::memcpy(rm.data(), data.data() + off, bytes);
    *ts[k] = rm;
    off += bytes;
  }
  if (off != data.size()) throw Error(ErrorCode::InvalidCheckpoint, "trailing bytes in checkpoint");
  return p;
}

}  // namespace sigs
