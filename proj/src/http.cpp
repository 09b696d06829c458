#include "obs/http.hpp"

#include <httplib.h>

#include "obs/error.hpp"

namespace obs::http {

Response post_json(const std::string& url, const std::string& body,
                   const std::map<std::string, std::string>& headers, int timeout_seconds) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::ConfigError, "URL without scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  const auto origin = url.substr(0, path_start);
  const auto path = path_start == std::string::npos ? std::string("/") : url.substr(path_start);

  httplib::Client client(origin);
  client.set_connection_timeout(timeout_seconds);
  client.set_read_timeout(timeout_seconds);
  client.set_write_timeout(timeout_seconds);

  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = client.Post(path, h, body, "application/json");
  if (!res) {
    throw Error(ErrorCode::IoFailure, "request to " + url + " failed: " + httplib::to_string(res.error()));
  }
  return {res->status, res->body};
}

}  // namespace obs::http
