#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "n2n/checkpoint.hpp"
#include "n2n/image.hpp"
#include "n2n/losses.hpp"
#include "n2n/networks.hpp"
#include "n2n/optim.hpp"

namespace n2n::train {

struct TrainConfig {
  nn::LossMode loss_mode = nn::LossMode::CGAN_L1;
  double lambda = 100.0;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int batch_size = 1;
  int epochs = 400;
  std::uint64_t seed = 0;
  double width_multiplier = 1.0;
  std::string manifest;
  std::string checkpoint_dir;
  std::string source_modality = "A";
  std::string target_modality = "B";
  std::string split = "train";
  int image_size = 256;
  bool non_saturating = true;

  // Unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;
  void validate() const;
  // FNV-1a of the canonical JSON without the fields that may change on
  // resume (epochs, checkpoint_dir).
  std::uint64_t hash() const;
};

struct StepLosses {
  std::uint64_t step = 0;
  double d_loss = 0.0;  // -loss_cgan, 0 when D is not trained
  double g_adv = 0.0;
  double g_l1 = 0.0;
  double g_total = 0.0;
};

using TrainPair = std::pair<ImageTensor, ImageTensor>;

// Generator/discriminator pair with Adam state. One instance per run.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);

  const TrainConfig& config() const { return config_; }
  nn::Generator<float>& generator() { return gen_; }
  nn::Discriminator<float>& discriminator() { return disc_; }
  std::uint64_t global_step() const { return step_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }

  // One D update (adversarial modes) then one G update.
  StepLosses train_step(const ImageTensor& x, const ImageTensor& y);

  // The two halves of train_step, exposed for tests. `fake` is G(x) from the
  // current step's forward pass.
  ImageTensor generate_for_step(const ImageTensor& x);
  double discriminator_phase(const ImageTensor& x, const ImageTensor& y, const ImageTensor& fake);
  StepLosses generator_phase(const ImageTensor& x, const ImageTensor& y, const ImageTensor& fake);

  Checkpoint to_checkpoint() const;
  // Restores parameters and optimizer state; throws ConfigError when the
  // checkpoint was produced under a different configuration hash.
  void restore(const Checkpoint& checkpoint);

 private:
  TrainConfig config_;
  nn::Generator<float> gen_;
  nn::Discriminator<float> disc_;
  nn::Adam<float> opt_g_;
  nn::Adam<float> opt_d_;
  std::uint64_t step_ = 0;
  int epoch_ = 0;
};

inline constexpr const char* kTranslatorKind = "translator";

// Builds a generator from a translator checkpoint.
nn::Generator<float> load_generator(const Checkpoint& checkpoint);

// Deterministic per-step dropout seed.
std::uint64_t dropout_seed(std::uint64_t seed, std::uint64_t step);

// Epoch visiting order of n pairs.
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  // Called after every step; returning false stops training early.
  std::function<bool(const StepLosses&, int epoch)> on_step;
  bool write_checkpoints = true;
};

struct TrainResult {
  std::vector<StepLosses> trace;
  Checkpoint final_checkpoint;
  std::vector<std::filesystem::path> written;
};

// Loads (source, target) slice pairs of config.split through the 256x256
// generation pipeline.
std::vector<TrainPair> load_training_pairs(const TrainConfig& config);

// Epoch loop with seeded shuffling and periodic checkpoints every
// max(1, epochs/10) epochs. Aborts with NumericError on a non-finite loss.
TrainResult train(const TrainConfig& config, const std::vector<TrainPair>& pairs, const TrainOptions& options = {});

// Runs G on each 8-bit image. Images whose extent is not a multiple of 256 are
// resized to 256x256 and back.
std::vector<Image> translate(nn::Generator<float>& generator, const std::vector<Image>& images, bool stochastic,
                             std::uint64_t seed);

}  // namespace n2n::train
