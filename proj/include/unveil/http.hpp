#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>

namespace unveil::http {

/// Connection failure, timeout, or non-200 status.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reply that is not JSON or violates the endpoint contract.
class MalformedReply : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// POSTs `body` to an `http://host:port/path` URL and parses the JSON reply.
nlohmann::json post_json(const std::string& url, const nlohmann::json& body, int timeout_ms);

/// Loopback JSON-over-HTTP server for tests and offline runs. Serves POST on `path`
/// with `handler`; runs on a background thread until destroyed.
class LocalJsonServer {
 public:
  using Handler = std::function<nlohmann::json(const nlohmann::json&)>;

  LocalJsonServer(std::string path, Handler handler);
  ~LocalJsonServer();
  LocalJsonServer(const LocalJsonServer&) = delete;
  LocalJsonServer& operator=(const LocalJsonServer&) = delete;

  int port() const;
  std::string url() const;
  /// Sleep before answering, to exercise client timeouts.
  void set_delay_ms(int ms);
  /// Reply with a raw non-JSON body instead of calling the handler.
  void set_raw_reply(std::string body);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace unveil::http
