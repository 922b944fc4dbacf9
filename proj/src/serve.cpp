#include "lanekeeper/serve.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <iostream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace lanekeeper::harness {

using json = nlohmann::ordered_json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  if (bytes.empty()) return out;
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

void CommandMailbox::post(const RemoteCommand& cmd, Clock::time_point at) {
  std::lock_guard lock(mu_);
  slot_.emplace(cmd, at);
}

void CommandMailbox::clear() {
  std::lock_guard lock(mu_);
  slot_.reset();
}

std::optional<RemoteCommand> CommandMailbox::fresh(Clock::time_point now,
                                                   std::chrono::duration<double, std::milli> max_age) const {
  std::lock_guard lock(mu_);
  if (!slot_ || now - slot_->second > max_age) return std::nullopt;
  return slot_->first;
}

ClientMessage parse_client_message(std::string_view line) {
  ClientMessage msg;
  const json j = json::parse(line.begin(), line.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    msg.error = "not a JSON object";
    return msg;
  }
  if (!j.contains("type") || !j["type"].is_string()) {
    msg.error = "missing string field 'type'";
    return msg;
  }
  msg.type = j["type"].get<std::string>();
  if (msg.type == "cmd") {
    if (!j.contains("steer") || !j["steer"].is_number() || !j.contains("speed") || !j["speed"].is_number()) {
      msg.error = "cmd needs numeric 'steer' and 'speed'";
      return msg;
    }
    const double steer = j["steer"].get<double>(), speed = j["speed"].get<double>();
    if (!std::isfinite(steer) || !std::isfinite(speed)) {
      msg.error = "cmd values must be finite";
      return msg;
    }
    msg.kind = ClientMessage::Kind::kCommand;
    msg.command = {std::clamp(steer, -1.0, 1.0), std::clamp(speed, 0.0, 1.0)};
  } else if (msg.type == "session") {
    if (!j.contains("record") || !j["record"].is_boolean()) {
      msg.error = "session needs boolean 'record'";
      return msg;
    }
    msg.kind = ClientMessage::Kind::kSession;
    msg.record = j["record"].get<bool>();
  } else {
    msg.kind = ClientMessage::Kind::kUnknown;
  }
  return msg;
}

std::string encode_frame_message(const FrameMessage& m) {
  if (m.image == nullptr || m.image->channels() != 3) throw std::invalid_argument("frame message needs an RGB image");
  json j;
  j["type"] = "frame";
  j["seq"] = m.seq;
  j["width"] = m.image->width();
  j["height"] = m.image->height();
  j["rgb_base64"] = base64_encode(m.image->pixels());
  j["pose"] = {{"x", m.pose.x},
               {"y", m.pose.y},
               {"heading", m.pose.heading},
               {"odometer", m.pose.odometer},
               {"cross_track_error", m.cross_track_error}};
  j["laps"] = m.laps;
  j["speed"] = m.speed;
  j["steer"] = m.steer;
  return j.dump() + "\n";
}

namespace {

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int get() const { return fd_; }
  void reset(int fd = -1) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
  }

 private:
  int fd_;
};

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

}  // namespace

ServeResult serve(const Config& base_config, const ServeOptions& options) {
  Config config = base_config;
  config.controller = ControllerKind::kTeleop;
  config.validate();

  Socket listener(::socket(AF_INET, SOCK_STREAM, 0));
  if (listener.get() < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  const int yes = 1;
  ::setsockopt(listener.get(), SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(options.port));
  if (::inet_pton(AF_INET, config.serve_host.c_str(), &addr.sin_addr) != 1) {
    throw std::invalid_argument("serve: bad host address '" + config.serve_host + "'");
  }
  if (::bind(listener.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw std::runtime_error("serve: port " + std::to_string(options.port) + " unavailable: " + std::strerror(errno));
  }
  if (::listen(listener.get(), 1) != 0) throw std::runtime_error(std::string("listen: ") + std::strerror(errno));
  socklen_t len = sizeof(addr);
  ::getsockname(listener.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  const int bound_port = ntohs(addr.sin_port);
  if (options.on_listening) options.on_listening(bound_port);

  ServeResult result;
  CommandMailbox mailbox;
  DropOldestQueue<std::string> outbox(static_cast<std::size_t>(config.frame_queue_depth));
  std::mutex state_mu;
  std::condition_variable state_cv;
  bool connected = false;
  std::atomic<bool> done{false};
  std::atomic<bool> recording{false};
  std::atomic<long> frames_sent{0};
  std::atomic<long> ignored{0};
  std::atomic<int> sessions{0};

  auto handle_line = [&](std::string_view line) {
    if (line.empty()) return;
    const ClientMessage msg = parse_client_message(line);
    switch (msg.kind) {
      case ClientMessage::Kind::kCommand:
        mailbox.post(msg.command);
        break;
      case ClientMessage::Kind::kSession:
        recording = msg.record;
        break;
      case ClientMessage::Kind::kUnknown:
        ++ignored;
        std::cerr << "warning: ignoring message of unknown type '" << msg.type << "'\n";
        break;
      case ClientMessage::Kind::kInvalid:
        ++ignored;
        std::cerr << "warning: ignoring malformed message: " << msg.error << "\n";
        break;
    }
  };

  // Client session role: accept, read commands, write queued messages.
  std::thread session([&] {
    while (!done) {
      pollfd lp{listener.get(), POLLIN, 0};
      if (::poll(&lp, 1, 50) <= 0) continue;
      Socket client(::accept(listener.get(), nullptr, nullptr));
      if (client.get() < 0) continue;
      ++sessions;
      {
        std::lock_guard lock(state_mu);
        connected = true;
      }
      state_cv.notify_all();

      std::string inbuf;
      char buf[4096];
      bool alive = true;
      while (alive) {
        const bool finishing = done;
        while (auto out = outbox.try_pop()) {
          if (!send_all(client.get(), *out)) {
            alive = false;
            break;
          }
          ++frames_sent;
        }
        if (!alive || finishing) break;
        pollfd cp{client.get(), POLLIN, 0};
        if (::poll(&cp, 1, 5) > 0) {
          const ssize_t n = ::recv(client.get(), buf, sizeof(buf), 0);
          if (n <= 0) {
            alive = false;
            break;
          }
          inbuf.append(buf, static_cast<std::size_t>(n));
          std::size_t nl;
          while ((nl = inbuf.find('\n')) != std::string::npos) {
            handle_line(std::string_view(inbuf).substr(0, nl));
            inbuf.erase(0, nl + 1);
          }
        }
      }
      mailbox.clear();
      {
        std::lock_guard lock(state_mu);
        connected = false;
      }
      state_cv.notify_all();
    }
  });

  VehiclePose last_pose = start_pose(config.track, config.start_behind);
  int last_laps = 0;
  long seq = 0;
  long last_stream_tick = -1;
  const double stream_period = 1.0 / config.stream_hz;
  using Clock = std::chrono::steady_clock;
  Clock::time_point deadline = Clock::now();
  const auto tick_duration =
      std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config.tick));

  EpisodeHooks hooks;
  hooks.wait_if_paused = [&] {
    std::unique_lock lock(state_mu);
    if (!connected) {
      state_cv.wait(lock, [&] { return connected || done.load(); });
      deadline = Clock::now();
    }
    lock.unlock();
    if (config.serve_realtime) {
      std::this_thread::sleep_until(deadline);
      deadline += tick_duration;
    }
  };
  hooks.remote_command = [&] {
    return mailbox.fresh(Clock::now(), std::chrono::duration<double, std::milli>(config.stale_command_ms));
  };
  hooks.on_tick = [&](long, const VehiclePose& pose, const LapState& laps) {
    last_pose = pose;
    last_laps = laps.laps_completed;
    return true;
  };
  hooks.on_frame = [&](const FrameEvent& ev) {
    if (recording) {
      e2e::log_record(result.dataset, ev.frame.frame, ev.label, static_cast<double>(ev.tick) * config.tick,
                      config.record);
    }
    if (last_stream_tick >= 0 && (ev.tick - last_stream_tick) * config.tick < stream_period - 1e-9) return;
    last_stream_tick = ev.tick;
    const ImageBuffer small = resize_area(ev.frame.frame, config.stream_width, config.stream_height);
    FrameMessage msg{++seq, &small, last_pose, cross_track_error(config.track, last_pose), last_laps,
                     ev.applied.linear_x, ev.applied.angular_z};
    if (outbox.push(encode_frame_message(msg))) ++result.frames_dropped;
  };

  try {
    result.metrics = run_episode(config, hooks);
  } catch (...) {
    done = true;
    state_cv.notify_all();
    session.join();
    throw;
  }
  json end;
  end["type"] = "end";
  end["metrics"] = json::parse(metrics_to_json(result.metrics));
  outbox.push(end.dump() + "\n");
  done = true;
  state_cv.notify_all();
  session.join();

  result.frames_sent = frames_sent;
  result.ignored_messages = ignored;
  result.sessions = sessions;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    write_metrics(result.metrics, options.out_dir / "metrics.json");
    if (!result.dataset.empty()) e2e::save_dataset(result.dataset, options.out_dir / "dataset");
  }
  return result;
}

}  // namespace lanekeeper::harness
