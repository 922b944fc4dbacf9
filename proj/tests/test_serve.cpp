#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <future>
#include <thread>

#include <json.hpp>

#include "lanekeeper/serve.hpp"

using namespace lanekeeper;
using namespace lanekeeper::harness;
using json = nlohmann::json;
using namespace std::chrono_literals;

namespace {

// Minimal blocking NDJSON client.
class FakeClient {
 public:
  explicit FakeClient(int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw std::runtime_error("connect failed");
    }
  }
  ~FakeClient() { close(); }
  FakeClient(const FakeClient&) = delete;
  FakeClient& operator=(const FakeClient&) = delete;

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  void send_line(const std::string& line) {
    const std::string data = line + "\n";
    ASSERT_EQ(::send(fd_, data.data(), data.size(), MSG_NOSIGNAL), static_cast<ssize_t>(data.size()));
  }

  // Next complete line, or nothing on EOF.
  std::optional<std::string> read_line() {
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return line;
      }
      char tmp[65536];
      const ssize_t n = ::recv(fd_, tmp, sizeof(tmp), 0);
      if (n <= 0) return std::nullopt;
      buf_.append(tmp, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_ = -1;
  std::string buf_;
};

Config serve_config(long ticks) {
  Config c;
  c.max_ticks = ticks;
  c.stream_width = 64;
  c.stream_height = 48;
  return c;
}

// Starts serve() on an ephemeral port; returns the future and the port.
std::pair<std::future<ServeResult>, int> start_server(const Config& c, ServeOptions opts = {}) {
  auto port = std::make_shared<std::promise<int>>();
  auto port_future = port->get_future();
  opts.port = 0;
  opts.on_listening = [port](int p) { port->set_value(p); };
  auto result = std::async(std::launch::async, [c, opts] { return serve(c, opts); });
  if (port_future.wait_for(5s) != std::future_status::ready) throw std::runtime_error("server did not start");
  return {std::move(result), port_future.get()};
}

}  // namespace

TEST(Base64, KnownVectors) {
  auto enc = [](std::string_view s) {
    return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foo"), "Zm9v");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
}

TEST(Mailbox, LatestFreshCommandWins) {
  CommandMailbox box;
  const auto t0 = CommandMailbox::Clock::now();
  EXPECT_FALSE(box.fresh(t0, 500ms).has_value());
  box.post({0.1, 0.2}, t0);
  box.post({-0.3, 0.4}, t0 + 10ms);
  const auto got = box.fresh(t0 + 20ms, 500ms);
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(got->steer, -0.3);
  EXPECT_FALSE(box.fresh(t0 + 600ms, 500ms).has_value());
  box.clear();
  EXPECT_FALSE(box.fresh(t0 + 20ms, 500ms).has_value());
}

TEST(DropOldest, KeepsNewest) {
  DropOldestQueue<int> q(3);
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(q.push(i));
  EXPECT_TRUE(q.push(3));
  EXPECT_TRUE(q.push(4));
  EXPECT_EQ(q.size(), 3u);
  EXPECT_EQ(q.dropped(), 2u);
  EXPECT_EQ(q.try_pop(), 2);
  EXPECT_EQ(q.pop_for(1ms), 3);
  EXPECT_EQ(q.try_pop(), 4);
  EXPECT_FALSE(q.try_pop().has_value());
  EXPECT_FALSE(q.pop_for(1ms).has_value());
}

TEST(ClientMessages, Parsing) {
  const ClientMessage cmd = parse_client_message(R"({"type":"cmd","steer":-2.5,"speed":0.5})");
  EXPECT_EQ(cmd.kind, ClientMessage::Kind::kCommand);
  EXPECT_EQ(cmd.command.steer, -1.0);
  EXPECT_EQ(cmd.command.speed, 0.5);
  const ClientMessage rec = parse_client_message(R"({"type":"session","record":true})");
  EXPECT_EQ(rec.kind, ClientMessage::Kind::kSession);
  EXPECT_TRUE(rec.record);
  const ClientMessage unknown = parse_client_message(R"({"type":"honk"})");
  EXPECT_EQ(unknown.kind, ClientMessage::Kind::kUnknown);
  EXPECT_EQ(unknown.type, "honk");
  EXPECT_EQ(parse_client_message("not json").kind, ClientMessage::Kind::kInvalid);
  EXPECT_EQ(parse_client_message(R"({"type":"cmd","steer":"left","speed":1})").kind, ClientMessage::Kind::kInvalid);
  EXPECT_EQ(parse_client_message(R"({"type":"session"})").kind, ClientMessage::Kind::kInvalid);
}

TEST(FrameMessages, Encoding) {
  const ImageBuffer img(2, 1, 3, std::vector<std::uint8_t>{'f', 'o', 'o', 'b', 'a', 'r'});
  FrameMessage m;
  m.seq = 7;
  m.image = &img;
  m.pose = {1.0, 2.0, 0.5, 3.0};
  m.laps = 2;
  m.speed = 4.0;
  m.steer = -0.25;
  const std::string line = encode_frame_message(m);
  ASSERT_EQ(line.back(), '\n');
  const json j = json::parse(line);
  EXPECT_EQ(j["type"], "frame");
  EXPECT_EQ(j["seq"], 7);
  EXPECT_EQ(j["width"], 2);
  EXPECT_EQ(j["height"], 1);
  EXPECT_EQ(j["rgb_base64"], "Zm9vYmFy");
  EXPECT_EQ(j["pose"]["heading"], 0.5);
  EXPECT_EQ(j["laps"], 2);
  EXPECT_EQ(j["steer"], -0.25);
  const ImageBuffer gray(2, 1, 1);
  m.image = &gray;
  EXPECT_THROW(encode_frame_message(m), std::invalid_argument);
}

TEST(Serve, BusyPortThrows) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = 0;
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  ASSERT_EQ(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), 0);
  ASSERT_EQ(::listen(fd, 1), 0);
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ServeOptions opts;
  opts.port = ntohs(addr.sin_port);
  EXPECT_THROW(serve(serve_config(10), opts), std::runtime_error);
  ::close(fd);
}

TEST(Serve, ScriptedClientDrivesStraightAndRecords) {
  const Config c = serve_config(120);
  auto [result, port] = start_server(c);
  FakeClient client(port);
  client.send_line(R"({"type":"session","record":true})");
  client.send_line(R"({"type":"honk"})");
  client.send_line("garbage");

  std::atomic<bool> stop{false};
  std::thread driver([&] {
    while (!stop) {
      client.send_line(R"({"type":"cmd","steer":0,"speed":0.5})");
      std::this_thread::sleep_for(40ms);
    }
  });

  std::vector<json> frames;
  std::optional<json> end;
  while (auto line = client.read_line()) {
    json j = json::parse(*line);
    if (j["type"] == "end") {
      end = j;
      break;
    }
    frames.push_back(std::move(j));
  }
  stop = true;
  driver.join();
  const ServeResult r = result.get();

  ASSERT_TRUE(end.has_value());
  EXPECT_EQ((*end)["metrics"]["total_ticks"], 120);
  ASSERT_GE(frames.size(), 5u);
  const double heading0 = frames.front()["pose"]["heading"];
  for (std::size_t i = 1; i < frames.size(); ++i) {
    EXPECT_GT(frames[i]["seq"].get<long>(), frames[i - 1]["seq"].get<long>());
    EXPECT_EQ(frames[i]["pose"]["heading"].get<double>(), heading0);
    EXPECT_EQ(frames[i]["steer"].get<double>(), 0.0);
  }
  EXPECT_GT(frames.back()["pose"]["odometer"].get<double>(), frames.front()["pose"]["odometer"].get<double>());
  EXPECT_EQ(frames.front()["width"], 64);
  EXPECT_EQ(r.ignored_messages, 2);
  EXPECT_EQ(r.sessions, 1);
  EXPECT_EQ(r.frames_sent, static_cast<long>(frames.size()) + 1);

  ASSERT_FALSE(r.dataset.empty());
  const e2e::Dataset augmented = e2e::augment_dataset(r.dataset);
  EXPECT_EQ(augmented.size(), 10 * r.dataset.size());
  e2e::TrainOptions opt;
  opt.epochs = 20;
  const e2e::TrainResult trained = e2e::train(augmented, opt);
  EXPECT_LE(trained.loss_history.back(), trained.loss_history.front());
}

TEST(Serve, PausesWhileDisconnectedAndResumes) {
  const Config c = serve_config(60);
  auto [result, port] = start_server(c);
  long last_seq = 0;
  {
    FakeClient first(port);
    for (int i = 0; i < 3; ++i) {
      const auto line = first.read_line();
      ASSERT_TRUE(line.has_value());
      last_seq = json::parse(*line)["seq"];
    }
  }
  std::this_thread::sleep_for(200ms);
  ASSERT_EQ(result.wait_for(0ms), std::future_status::timeout);  // paused, not finished
  FakeClient second(port);
  bool ended = false;
  while (auto line = second.read_line()) {
    const json j = json::parse(*line);
    if (j["type"] == "end") {
      ended = true;
      break;
    }
    EXPECT_GT(j["seq"].get<long>(), last_seq);
  }
  EXPECT_TRUE(ended);
  const ServeResult r = result.get();
  EXPECT_EQ(r.sessions, 2);
  EXPECT_EQ(r.metrics.total_ticks, 60);
}
