#pragma once

#include "tumorseg/engine.hpp"

namespace tumorseg {

// Internal back door for the translation units that construct models.
struct ModelAccess {
  static Model make(const ModelConfig& config, const Normalization& norm) { return Model(config, norm); }
  static void set_config(Model& model, const ModelConfig& config) { model.config_ = config; }
};

namespace detail {
void write_checkpoint(const Model& model, const std::filesystem::path& run_dir, const EpochRecord& record);
void write_run_config(const ModelConfig& config, const std::filesystem::path& run_dir);
}  // namespace detail

}  // namespace tumorseg
