#include "nestnet/descriptor.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace nestnet {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      size_t pos = 0;
      int n = std::stoi(item, &pos);
      if (pos != item.size()) throw std::invalid_argument("");
      out.push_back(n);
    } catch (const std::exception&) {
      throw ConfigError("descriptor: bad integer '" + item + "' in list for key '" + key + "'");
    }
  }
  if (out.empty()) throw ConfigError("descriptor: empty list for key '" + key + "'");
  return out;
}

int parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    long n = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return static_cast<int>(n);
  } catch (const std::exception&) {
    throw ConfigError("descriptor: bad integer '" + v + "' for key '" + key + "'");
  }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return n;
  } catch (const std::exception&) {
    throw ConfigError("descriptor: bad integer '" + v + "' for key '" + key + "'");
  }
}

bool parse_bool(const std::string& v, const std::string& key) {
  std::string s = v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("descriptor: bad boolean '" + v + "' for key '" + key + "'");
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

void ArchDescriptor::validate() const {
  if (stage_widths.empty()) throw ConfigError("descriptor: at least one stage required");
  if (stage_widths.size() != stage_blocks.size())
    throw ConfigError("descriptor: stages has " + std::to_string(stage_widths.size()) +
                      " entries but blocks has " + std::to_string(stage_blocks.size()));
  if (groups < 1) throw ConfigError("descriptor: groups must be >= 1");
  for (size_t s = 0; s < stage_widths.size(); ++s) {
    const int w = stage_widths[s];
    if (w < 1) throw ConfigError("descriptor: stage width must be positive");
    if (w % groups != 0) {
      const int lo = (w / groups) * groups;
      const int hi = lo + groups;
      std::string hint = lo >= groups ? std::to_string(lo) + " or " + std::to_string(hi)
                                      : std::to_string(hi);
      throw ConfigError("descriptor: stage " + std::to_string(s) + " width " + std::to_string(w) +
                        " is not divisible into " + std::to_string(groups) +
                        " groups; nearest valid widths: " + hint);
    }
    if (stage_blocks[s] < 1) throw ConfigError("descriptor: each stage needs >= 1 block");
  }
  if (classes < 2) throw ConfigError("descriptor: classes must be >= 2");
  if (kernel < 1 || kernel % 2 == 0)
    throw ConfigError("descriptor: kernel size must be odd and positive, got " +
                      std::to_string(kernel));
  if (input_channels < 1) throw ConfigError("descriptor: input_channels must be >= 1");
  if (input_grouped && input_channels % groups != 0)
    throw ConfigError("descriptor: input_channels " + std::to_string(input_channels) +
                      " cannot be split into " + std::to_string(groups) +
                      " input groups; use a multiple of " + std::to_string(groups) +
                      " or set input_grouped = false");
}

std::string ArchDescriptor::to_text() const {
  std::ostringstream os;
  os << "stages = " << join_ints(stage_widths) << "\n";
  os << "blocks = " << join_ints(stage_blocks) << "\n";
  os << "groups = " << groups << "\n";
  os << "classes = " << classes << "\n";
  os << "kernel = " << kernel << "\n";
  os << "input_channels = " << input_channels << "\n";
  os << "input_grouped = " << (input_grouped ? "true" : "false") << "\n";
  os << "final_head_site = " << (final_head_site ? "true" : "false") << "\n";
  os << "seed = " << seed << "\n";
  return os.str();
}

std::string ArchDescriptor::to_json() const {
  nlohmann::json j;
  j["stages"] = stage_widths;
  j["blocks"] = stage_blocks;
  j["groups"] = groups;
  j["classes"] = classes;
  j["kernel"] = kernel;
  j["input_channels"] = input_channels;
  j["input_grouped"] = input_grouped;
  j["final_head_site"] = final_head_site;
  j["seed"] = seed;
  return j.dump(2);
}

ArchDescriptor ArchDescriptor::from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("descriptor: invalid JSON: ") + e.what());
  }
  ArchDescriptor d;
  try {
    d.stage_widths = j.at("stages").get<std::vector<int>>();
    d.stage_blocks = j.at("blocks").get<std::vector<int>>();
    d.groups = j.at("groups").get<int>();
    d.classes = j.at("classes").get<int>();
    d.kernel = j.at("kernel").get<int>();
    d.input_channels = j.at("input_channels").get<int>();
    d.input_grouped = j.at("input_grouped").get<bool>();
    d.final_head_site = j.at("final_head_site").get<bool>();
    d.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("descriptor: missing or mistyped field: ") + e.what());
  }
  d.validate();
  return d;
}

ArchDescriptor ArchDescriptor::from_text(const std::string& text) {
  ArchDescriptor d;
  bool saw_stages = false, saw_blocks = false;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("descriptor: line " + std::to_string(lineno) +
                        " is not 'key = value': '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "stages") {
      d.stage_widths = parse_int_list(val, key);
      saw_stages = true;
    } else if (key == "blocks") {
      d.stage_blocks = parse_int_list(val, key);
      saw_blocks = true;
    } else if (key == "groups") {
      d.groups = parse_int(val, key);
    } else if (key == "classes") {
      d.classes = parse_int(val, key);
    } else if (key == "kernel") {
      d.kernel = parse_int(val, key);
    } else if (key == "input_channels") {
      d.input_channels = parse_int(val, key);
    } else if (key == "input_grouped") {
      d.input_grouped = parse_bool(val, key);
    } else if (key == "final_head_site") {
      d.final_head_site = parse_bool(val, key);
    } else if (key == "seed") {
      d.seed = parse_u64(val, key);
    } else {
      throw ConfigError("descriptor: unknown key '" + key + "' on line " + std::to_string(lineno));
    }
  }
  if (!saw_stages || !saw_blocks)
    throw ConfigError("descriptor: required keys 'stages' and 'blocks' missing");
  d.validate();
  return d;
}

ArchDescriptor ArchDescriptor::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("descriptor: cannot open file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  // Accept either the key-value form or a JSON object.
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return from_json(text);
  return from_text(text);
}

}  // namespace nestnet
