#pragma once

#include <memory>
#include <string>
#include <string_view>

#include <httplib.h>

#include "icsd/errors.hpp"

namespace icsd {

struct ParsedUrl {
    std::string base;  // scheme://host[:port]
    std::string path;  // /path, "/" if absent
};

inline ParsedUrl parse_url(std::string_view url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos)
        throw ConfigError("url must start with http:// or https://: " + std::string(url));
    auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl out;
    if (path_start == std::string_view::npos) {
        out.base = std::string(url);
        out.path = "/";
    } else {
        out.base = std::string(url.substr(0, path_start));
        out.path = std::string(url.substr(path_start));
    }
    return out;
}

inline std::unique_ptr<httplib::Client> make_http_client(const ParsedUrl& url, int timeout_ms) {
    auto client = std::make_unique<httplib::Client>(url.base);
    client->set_connection_timeout(0, timeout_ms * 1000);
    client->set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    client->set_write_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
    return client;
}

}  // namespace icsd
