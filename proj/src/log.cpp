#include "wrangan/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

namespace wrangan::log {

namespace {
std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;

void emit(Level at, const char* tag, std::string_view message) {
  if (at < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[%s] %.*s\n", tag, static_cast<int>(message.size()), message.data());
}
}  // namespace

void set_level(Level lvl) { g_level.store(lvl); }
Level level() { return g_level.load(); }

void info(std::string_view message) { emit(Level::info, "info", message); }
void warn(std::string_view message) { emit(Level::warn, "warn", message); }
void error(std::string_view message) { emit(Level::error, "error", message); }

}  // namespace wrangan::log
