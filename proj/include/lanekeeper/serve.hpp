// Teleoperation / telemetry service: one TCP client at a time speaking
// newline-delimited JSON. The episode loop and the client session share only
// a latest-command mailbox and a bounded drop-oldest frame queue.
#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "lanekeeper/harness.hpp"

namespace lanekeeper::harness {

std::string base64_encode(std::span<const std::uint8_t> bytes);

// Single-slot, last-writer-wins.
class CommandMailbox {
 public:
  using Clock = std::chrono::steady_clock;

  void post(const RemoteCommand& cmd, Clock::time_point at = Clock::now());
  void clear();
  // The latest command unless it is older than max_age.
  std::optional<RemoteCommand> fresh(Clock::time_point now, std::chrono::duration<double, std::milli> max_age) const;

 private:
  mutable std::mutex mu_;
  std::optional<std::pair<RemoteCommand, Clock::time_point>> slot_;
};

// Bounded FIFO that discards its oldest element when full.
template <typename T>
class DropOldestQueue {
 public:
  explicit DropOldestQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  // Returns true when an element had to be dropped.
  bool push(T value) {
    std::lock_guard lock(mu_);
    bool dropped = false;
    if (items_.size() == capacity_) {
      items_.pop_front();
      ++dropped_;
      dropped = true;
    }
    items_.push_back(std::move(value));
    cv_.notify_one();
    return dropped;
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mu_);
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  template <typename Rep, typename Period>
  std::optional<T> pop_for(std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !items_.empty(); })) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }
  std::size_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
  std::size_t dropped_ = 0;
};

struct ClientMessage {
  enum class Kind { kCommand, kSession, kUnknown, kInvalid };
  Kind kind = Kind::kInvalid;
  RemoteCommand command;
  bool record = false;
  std::string type;   // as received, for unknown messages
  std::string error;  // for invalid messages
};

ClientMessage parse_client_message(std::string_view line);

struct FrameMessage {
  long seq = 0;
  const ImageBuffer* image = nullptr;  // RGB
  VehiclePose pose;
  double cross_track_error = 0.0;
  int laps = 0;
  double speed = 0.0;
  double steer = 0.0;  // applied yaw rate, rad/s
};

std::string encode_frame_message(const FrameMessage& msg);

struct ServeOptions {
  int port = 8765;  // 0 binds an ephemeral port
  // Dataset (when recording was switched on) and metrics.json go here.
  std::filesystem::path out_dir;
  std::function<void(int port)> on_listening;
};

struct ServeResult {
  LapMetrics metrics;
  e2e::Dataset dataset;
  long frames_sent = 0;
  long frames_dropped = 0;
  long ignored_messages = 0;
  int sessions = 0;
};

// Runs a teleop episode. The loop waits for a client before the first tick
// and pauses whenever the client disconnects. Throws if the port is busy.
ServeResult serve(const Config& config, const ServeOptions& options);

}  // namespace lanekeeper::harness
