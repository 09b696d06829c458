#pragma once

#include <map>
#include <string>

namespace obs::http {

struct Response {
  int status = 0;
  std::string body;
};

/// POSTs a JSON body to a full URL (`http[s]://host[:port]/path`). Throws
/// obs::Error(ErrorCode::IoFailure) when the connection itself fails.
Response post_json(const std::string& url, const std::string& body,
                   const std::map<std::string, std::string>& headers = {},
                   int timeout_seconds = 120);

}  // namespace obs::http
