#include "nestnet/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "nestnet/errors.hpp"

namespace nestnet {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("csv: cannot write '" + path + "'");
  return out;
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

double parse_cell(const std::string& cell, const std::string& path, int row) {
  try {
    size_t pos = 0;
    double v = std::stod(cell, &pos);
    while (pos < cell.size() && (cell[pos] == ' ' || cell[pos] == '\r')) ++pos;
    if (pos != cell.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError("csv: '" + path + "' row " + std::to_string(row) + ": bad numeric cell '" +
                    cell + "'");
  }
}

}  // namespace

void write_grid_csv(const std::string& path, const std::vector<double>& values, int L, int C) {
  if (values.size() != static_cast<size_t>(L) * C)
    throw DataError("csv: grid has " + std::to_string(values.size()) + " values, expected " +
                    std::to_string(L) + "x" + std::to_string(C));
  auto out = open_out(path);
  for (int l = 0; l < L; ++l) {
    for (int c = 0; c < C; ++c) {
      if (c) out << ",";
      out << fmt17(values[static_cast<size_t>(l) * C + c]);
    }
    out << "\n";
  }
}

GridCsv read_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open '" + path + "'");
  GridCsv g;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_cells(line);
    if (g.C == 0) {
      g.C = static_cast<int>(cells.size());
    } else if (static_cast<int>(cells.size()) != g.C) {
      throw DataError("csv: '" + path + "' row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " columns, expected " + std::to_string(g.C));
    }
    for (auto& cell : cells) g.values.push_back(parse_cell(cell, path, row));
    ++g.L;
  }
  if (g.L == 0) throw DataError("csv: '" + path + "' contains no data rows");
  return g;
}

void write_cost_csv(const std::string& path, const std::vector<SliceCost>& table, int L, int C) {
  if (table.size() != static_cast<size_t>(L) * C)
    throw DataError("csv: cost table has " + std::to_string(table.size()) +
                    " entries, expected " + std::to_string(L) + "x" + std::to_string(C));
  auto out = open_out(path);
  out << "d,w,params,macs,peak_activation\n";
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) {
      const auto& c = table[static_cast<size_t>(d - 1) * C + (w - 1)];
      out << d << "," << w << "," << c.params << "," << c.macs << "," << c.peak_activation
          << "\n";
    }
}

CostCsv read_cost_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "d,w,params,macs,peak_activation")
    throw DataError("csv: '" + path + "' is not a cost table: expected header "
                    "'d,w,params,macs,peak_activation', got '" + line + "'");
  CostCsv out;
  struct Row {
    int d, w;
    SliceCost c;
  };
  std::vector<Row> rows;
  int maxd = 0, maxw = 0, rowno = 1;
  while (std::getline(in, line)) {
    ++rowno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cells = split_cells(line);
    if (cells.size() != 5)
      throw DataError("csv: '" + path + "' row " + std::to_string(rowno) + " has " +
                      std::to_string(cells.size()) + " columns, expected 5 (d,w,params,macs,peak)");
    Row r;
    r.d = static_cast<int>(parse_cell(cells[0], path, rowno));
    r.w = static_cast<int>(parse_cell(cells[1], path, rowno));
    r.c.params = static_cast<int64_t>(parse_cell(cells[2], path, rowno));
    r.c.macs = static_cast<int64_t>(parse_cell(cells[3], path, rowno));
    r.c.peak_activation = static_cast<int64_t>(parse_cell(cells[4], path, rowno));
    if (r.d < 1 || r.w < 1)
      throw DataError("csv: '" + path + "' row " + std::to_string(rowno) + ": (d,w) must be >= 1");
    maxd = std::max(maxd, r.d);
    maxw = std::max(maxw, r.w);
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("csv: '" + path + "' contains no cost rows");
  if (rows.size() != static_cast<size_t>(maxd) * maxw)
    throw DataError("csv: '" + path + "' has " + std::to_string(rows.size()) +
                    " rows but the (d,w) ranges imply " + std::to_string(maxd) + "x" +
                    std::to_string(maxw));
  out.L = maxd;
  out.C = maxw;
  out.table.assign(rows.size(), SliceCost{});
  std::vector<char> seen(rows.size(), 0);
  for (const auto& r : rows) {
    const size_t i = static_cast<size_t>(r.d - 1) * maxw + (r.w - 1);
    if (seen[i]) throw DataError("csv: '" + path + "' repeats slice (" + std::to_string(r.d) +
                                 "," + std::to_string(r.w) + ")");
    seen[i] = 1;
    out.table[i] = r.c;
  }
  return out;
}

void write_metrics_csv(const std::string& path, const MetricsLog& log) {
  auto out = open_out(path);
  out << "# lambda " << log.lambda_descriptor << "\n";
  out << "step,l,c,loss,accuracy\n";
  for (const auto& e : log.entries)
    for (int l = 0; l < log.L; ++l)
      for (int c = 0; c < log.C; ++c)
        out << e.step << "," << l + 1 << "," << c + 1 << "," << fmt17(e.loss.at2(l, c)) << ","
            << fmt17(e.accuracy.at2(l, c)) << "\n";
}

}  // namespace nestnet
