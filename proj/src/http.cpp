#include "unveil/http.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <mutex>
#include <optional>
#include <regex>
#include <thread>

namespace unveil::http {

namespace {

struct ParsedUrl {
  std::string origin;
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw TransportError("invalid endpoint url '" + url + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

}  // namespace

nlohmann::json post_json(const std::string& url, const nlohmann::json& body, int timeout_ms) {
  const auto u = parse_url(url);
  httplib::Client cli(u.origin);
  const auto sec = timeout_ms / 1000;
  const auto usec = (timeout_ms % 1000) * 1000;
  cli.set_connection_timeout(sec, usec);
  cli.set_read_timeout(sec, usec);
  cli.set_write_timeout(sec, usec);
  auto res = cli.Post(u.path, body.dump(), "application/json");
  if (!res) throw TransportError("request to " + url + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw TransportError("request to " + url + " returned HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw MalformedReply("reply from " + url + " is not JSON");
  }
}

struct LocalJsonServer::Impl {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> delay_ms{0};
  std::mutex mu;
  std::optional<std::string> raw_reply;
};

LocalJsonServer::LocalJsonServer(std::string path, Handler handler) : impl_(std::make_unique<Impl>()) {
  Impl* impl = impl_.get();
  impl->server.Post(path, [impl, handler = std::move(handler)](const httplib::Request& req, httplib::Response& res) {
    if (const int d = impl->delay_ms.load(); d > 0) std::this_thread::sleep_for(std::chrono::milliseconds(d));
    {
      std::lock_guard lock(impl->mu);
      if (impl->raw_reply) {
        res.set_content(*impl->raw_reply, "text/plain");
        return;
      }
    }
    try {
      res.set_content(handler(nlohmann::json::parse(req.body)).dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(e.what(), "text/plain");
    }
  });
  impl->port = impl->server.bind_to_any_port("127.0.0.1");
  if (impl->port <= 0) throw TransportError("local server: cannot bind a loopback port");
  impl->thread = std::thread([impl] { impl->server.listen_after_bind(); });
  // wait until the accept loop runs
  for (int i = 0; i < 200 && !impl->server.is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
}

LocalJsonServer::~LocalJsonServer() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int LocalJsonServer::port() const { return impl_->port; }

std::string LocalJsonServer::url() const { return "http://127.0.0.1:" + std::to_string(impl_->port); }

void LocalJsonServer::set_delay_ms(int ms) { impl_->delay_ms = ms; }

void LocalJsonServer::set_raw_reply(std::string body) {
  std::lock_guard lock(impl_->mu);
  impl_->raw_reply = std::move(body);
}

}  // namespace unveil::http
