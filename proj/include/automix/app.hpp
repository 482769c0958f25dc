#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "automix/data_io.hpp"
#include "automix/mixblock.hpp"
#include "automix/models.hpp"
#include "automix/trainer.hpp"

namespace automix::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx | cifar10
  std::size_t n_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t image_size = 64;
  std::size_t num_classes = 4;
  std::size_t channels = 1;
  std::uint64_t seed = 7;
  // Relative paths resolve against $AUTOMIX_DATA_DIR when it is set.
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<std::string> cifar_train;
  std::string cifar_test;
};

struct AppConfig {
  TrainConfig train;
  DataConfig data;
};

// Desk-scale defaults used when neither a file nor a flag sets a field.
AppConfig default_config();

nlohmann::json to_json(const AppConfig& config);
// Throws ConfigError naming the offending field.
AppConfig config_from_json(const nlohmann::json& doc);

using Overrides = std::vector<std::pair<std::string, std::string>>;

// defaults <- file <- overrides. Keys are field names, nested ones dotted
// ("encoder.stage_channels", "data.n_per_class").
AppConfig resolve_config(const std::optional<std::string>& config_path,
                         const Overrides& overrides);

struct Datasets {
  LabeledDataset train;  // standardized
  LabeledDataset test;   // standardized with the training statistics
  ChannelStats stats;
};

Datasets load_datasets(const DataConfig& config);

// Checkpoint payload: the training state plus standardization statistics and
// the encoder layout needed to rebuild the model.
ParamSet model_checkpoint(const TrainState& state, const TrainConfig& config,
                          const ChannelStats& stats);

struct LoadedModel {
  EncoderConfig encoder;
  std::size_t feature_layer = 3;
  bool eval_teacher = false;
  ParamSet student;
  ParamSet teacher;
  MixBlockParams mixblock;
  ChannelStats stats;

  const ParamSet& eval_params() const { return eval_teacher ? teacher : student; }
};

// Throws FormatError when records are missing or inconsistent.
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct TrainRun {
  std::filesystem::path dir;
  FitResult fit;
};

// Creates a fresh run directory below `runs_root` holding manifest.json,
// metrics.csv, test_metrics.csv and checkpoint.bin.
TrainRun train_run(const AppConfig& config, const std::filesystem::path& runs_root,
                   std::ostream* log, const Datasets* preloaded = nullptr);

// Grayscale (P5) for one channel, P6 for three; values clipped to [0, 1].
void write_pnm(const std::filesystem::path& path, const Tensor& image);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace automix::app
