#pragma once

#include <string>
#include <vector>

#include "nestnet/cost.hpp"
#include "nestnet/train.hpp"

namespace nestnet {

// Plain numeric grid, L rows x C columns, comma-separated, no header.
void write_grid_csv(const std::string& path, const std::vector<double>& values, int L, int C);

struct GridCsv {
  int L = 0, C = 0;
  std::vector<double> values;  // row-major
};

// Rejects ragged rows and non-numeric cells with diagnostics naming the row.
GridCsv read_grid_csv(const std::string& path);

// Cost table: header d,w,params,macs,peak_activation then one row per slice
// in (d, w) row-major order.
void write_cost_csv(const std::string& path, const std::vector<SliceCost>& table, int L, int C);

struct CostCsv {
  int L = 0, C = 0;
  std::vector<SliceCost> table;
};

CostCsv read_cost_csv(const std::string& path);

// Evaluation log: a "# lambda <descriptor>" comment, a header, then one
// step,l,c,loss,accuracy row per head per logged step (l, c are 1-based).
void write_metrics_csv(const std::string& path, const MetricsLog& log);

}  // namespace nestnet
