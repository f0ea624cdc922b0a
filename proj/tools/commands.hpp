#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "shike/config.hpp"

namespace shike::cli {

struct ConfigSource {
  std::string path;
  std::vector<std::string> overrides;

  RunConfig load() const;
};

struct BuildDataOptions {
  ConfigSource config;
  std::string out;
};

struct TrainOptions {
  ConfigSource config;
  std::string out;
  std::string data;         // directory written by build-data; empty builds in memory
  std::string from_stage1;  // checkpoint; runs classifier retraining only
};

struct EvalOptions {
  ConfigSource config;
  std::string checkpoint;
  std::string data;
  std::string out;
};

struct DiagnoseOptions {
  EvalOptions eval;
  std::size_t bins = 20;
  std::string source = "ensemble";
  std::size_t expert = 0;
};

struct AblateOptions {
  ConfigSource config;
  std::string out;
  std::size_t seeds = 5;
  std::string rows = "all";
};

struct SweepOptions {
  ConfigSource config;
  std::string out;
  std::size_t seeds = 5;
  std::string grid = "1:A,B,C;2:AB,BC,AC;3:ABC";
};

struct LossesOptions {
  std::string logits;
  std::string out;
  bool gradients = false;
};

void build_data(const BuildDataOptions& options);
void train(const TrainOptions& options);
void eval(const EvalOptions& options);
void diagnose(const DiagnoseOptions& options);
void ablate(const AblateOptions& options);
void sweep_experts(const SweepOptions& options);
void losses(const LossesOptions& options);

}  // namespace shike::cli
