#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sigs/grammar.hpp"

namespace sigs {

struct ModelConfig {
  int rules = 0;    // C
  int max_len = 0;  // L_max
  int hidden = 256;
  int latent = 32;

  int input_dim() const { return rules * max_len; }
};

// Fully connected encoder (one-hot C*L -> hidden -> bias-free mu / logvar
// heads) and decoder (z -> hidden -> C*L logits), tanh hidden units. Logits
// use the decoder layout logits[pos * C + rule].
struct ModelParams {
  ModelConfig cfg;
  Eigen::MatrixXd W1, b1;    // hidden x D, hidden x 1
  Eigen::MatrixXd Wmu, Wlv;  // latent x hidden
  Eigen::MatrixXd W2, b2;    // hidden x latent, hidden x 1
  Eigen::MatrixXd W3, b3;    // D x hidden, D x 1

  static ModelParams zeros(const ModelConfig& cfg);
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  static constexpr std::array<const char*, 8> kNames{"W1", "b1", "Wmu", "Wlv", "W2", "b2", "W3", "b3"};
  std::array<Eigen::MatrixXd*, 8> tensors();
  std::array<const Eigen::MatrixXd*, 8> tensors() const;
  std::size_t num_params() const;
  void set_zero();
};

struct Encoding {
  Eigen::VectorXd mu, logvar;
};

Encoding encode(std::span<const int> seq, const ModelParams& p);
Encoding encode(const OneHotMatrix& x, const ModelParams& p);
Eigen::VectorXd reparameterize(const Eigen::VectorXd& mu, const Eigen::VectorXd& logvar, std::mt19937_64& rng);
// C*L logits, logits[pos * C + rule].
Eigen::VectorXd decode_logits(const Eigen::VectorXd& z, const ModelParams& p);
// Masked argmax decode of the decoder output.
DecodeResult decode(const Eigen::VectorXd& z, const ModelParams& p, const Grammar& g);

// Mean over positions of the softmax cross-entropy; dlogits (optional) is
// the gradient of that mean.
double loss_recon(std::span<const double> logits, std::span<const int> target, int rules,
                  std::span<double> dlogits = {});
double loss_kl(const Eigen::VectorXd& mu, const Eigen::VectorXd& logvar);

double beta_schedule(long step, double beta0 = 0.01, long warmup = 7000);
// Linear 0 -> 1 over ramp epochs after activation; 0 before activation.
double gamma_schedule(double epoch, std::optional<double> activation_epoch, double ramp = 5.0);

// Points are columns.
Eigen::MatrixXd random_directions(int dim, int k, std::uint64_t seed);
// Mean over batch points and directions of the squared excess over the
// reservoir support function. grad (optional) gets d loss / d batch.
double hull_loss(const Eigen::MatrixXd& reservoir, const Eigen::MatrixXd& batch, const Eigen::MatrixXd& directions,
                 Eigen::MatrixXd* grad = nullptr);

class Reservoir {
 public:
  explicit Reservoir(double delta = 0.5) : delta_(delta) {}
  // Inserts each column that is at least delta away from every stored point.
  int update(const Eigen::MatrixXd& batch);
  const Eigen::MatrixXd& points() const { return points_; }
  int size() const { return static_cast<int>(points_.cols()); }
  double delta() const { return delta_; }

 private:
  double delta_;
  Eigen::MatrixXd points_;
};

struct PersistencePair {
  double birth = 0, death = 0;
  std::array<int, 2> birth_edge{-1, -1};  // vertex pair of the creating edge (H1)
  std::array<int, 2> death_edge{-1, -1};  // longest edge of the killing simplex
};

struct Persistence {
  std::vector<PersistencePair> h0, h1;
};

// Vietoris-Rips persistence up to dimension 1 of the columns of pts.
Persistence rips_persistence(const Eigen::MatrixXd& pts);

struct PhLoss {
  double h0 = 0, h1 = 0;  // h0 already carries the a0 weight
  double total() const { return h0 + h1; }
};

// Clamped-lifetime loss at radius r. grad (optional) accumulates d/d pts.
PhLoss ph_loss(const Eigen::MatrixXd& pts, double r, double a0 = 1.0, Eigen::MatrixXd* grad = nullptr);

// E ||H v||^2 with H v from central differences of grad_f, one probe per
// column of `probes` cycled over the columns of zs.
double smoothness_estimate(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad_f,
                           const Eigen::MatrixXd& zs, const Eigen::MatrixXd& probes, double h = 1e-3);

// Same estimator for f(z) = sum of decoder logits, with the exact gradient of
// the estimate w.r.t. the decoder weights accumulated into grad.
double smoothness_loss(const ModelParams& p, const Eigen::MatrixXd& zs, const Eigen::MatrixXd& probes, double h = 1e-3,
                       ModelParams* grad = nullptr);

// Topology terms of one batch. PH runs on the batch means selected by
// ph_subset; smoothness runs on the (detached) sampled latents.
struct TopoContext {
  const Eigen::MatrixXd* reservoir = nullptr;
  const Eigen::MatrixXd* directions = nullptr;
  std::vector<double> radii;
  double a0 = 1.0;
  double w_hull = 0.8, w_ph = 0.8, w_smooth = 1e-4;
  Eigen::MatrixXd probes;
  std::vector<int> ph_subset;
};

struct BatchTerms {
  double ce = 0, kl = 0, hull = 0, ph = 0, smooth = 0, total = 0;
};

// recon_scale*recon + beta*KL + gamma*(w_hull*hull + w_ph*ph +
// w_smooth*smooth) on one batch with fixed reparameterization noise (latent x
// batch). grad, when given, receives the gradient (it is overwritten).
BatchTerms batch_objective(const ModelParams& p, const std::vector<const RuleSequence*>& batch,
                           const Eigen::MatrixXd& eps, double beta, double gamma, const TopoContext* topo,
                           ModelParams* grad, double recon_scale = 1.0);

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 1e-5;
  int batch = 64;
  // Multiplier on the per-position mean cross-entropy; 0 means L_max, i.e.
  // the sum over positions.
  double recon_scale = 0;
  int epochs = 200;
  int patience = 10;
  double beta0 = 0.01;
  long warmup = 7000;
  bool topo = true;
  double activation_acc = 0.20;
  double ramp_epochs = 5.0;
  int topo_every = 50;      // train steps between topology evaluations
  int val_topo_every = 12;  // validation batches between topology evaluations
  double w_hull = 0.8;
  double w_ph = 0.8;
  double w_smooth = 1e-4;
  int hull_directions = 256;
  int ph_max_points = 24;
  double ph_a0 = 1.0;
  std::vector<double> ph_radii{0.10, 0.50};  // empty: sqrt(2)*delta
  double delta = 0.5;
  int smooth_probes = 1;
  double plateau_factor = 0.2;
  int plateau_patience = 5;
  double clip_norm = 1.0;
  std::uint64_t seed = 42;
  int hidden = 256;
  int latent = 32;
};

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  double ce = 0, kl = 0, beta = 0, gamma = 0, hull = 0, ph = 0, smooth = 0, val_acc = 0, lr = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainLogRow> log;
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::vector<double> val_acc;     // per epoch
  std::optional<int> activation_epoch;
  double best_val_elbo = 0;
  int epochs_run = 0;
  std::vector<int> train_idx, val_idx, test_idx;
};

// 70/20/10 split of n items.
void split_dataset(std::size_t n, std::uint64_t seed, std::vector<int>& train, std::vector<int>& val,
                   std::vector<int>& test);

double seq_exact_accuracy(const std::vector<RuleSequence>& data, const std::vector<int>& idx, const ModelParams& p,
                          const Grammar& g);

TrainResult train(const std::vector<RuleSequence>& data, const Grammar& g, const TrainConfig& cfg,
                  std::uint64_t split_seed = 42);

std::string train_log_csv(const std::vector<TrainLogRow>& log);

// Binary checkpoint: magic line, JSON header (architecture, grammar hash,
// tensor shapes), then row-major float64 tensors.
void save_checkpoint(const std::string& path, const ModelParams& p, const Grammar& g);
ModelParams load_checkpoint(const std::string& path, const Grammar& g);

}  // namespace sigs
