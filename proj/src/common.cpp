#include "forge/common.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

#include "json.hpp"

namespace forge {

namespace {

int rank(std::string_view level) {
  if (level == "debug") return 0;
  if (level == "info") return 1;
  if (level == "warn") return 2;
  return 3;
}

std::atomic<int> g_min_rank{1};
std::mutex g_log_mu;

}  // namespace

void set_log_level(std::string_view level) { g_min_rank = rank(level); }

void log_event(std::string_view level, std::string_view msg, const std::string& fields_json) {
  if (rank(level) < g_min_rank) return;
  nlohmann::json rec = nlohmann::json::parse(fields_json, nullptr, false);
  if (!rec.is_object()) rec = nlohmann::json::object();
  rec["level"] = level;
  rec["msg"] = msg;
  const auto line = rec.dump();
  std::lock_guard lock(g_log_mu);
  std::cerr << line << '\n';
}

}  // namespace forge
