#pragma once

#include <chrono>
#include <stdexcept>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "miditune/render.hpp"
#include "miditune/scorer.hpp"

namespace miditune {

struct RemoteScorerConfig {
    std::string base_url;  // e.g. http://127.0.0.1:8900
    int timeout_ms = 10000;
    int max_retries = 2;   // retries after the first attempt, transient failures only
    int max_in_flight = 8;
    std::string bearer_token;
};

struct ScoringError : std::runtime_error {
    enum class Kind { connection, timeout, http_status, malformed_response, missing_field };
    Kind kind;
    ScoringError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

namespace detail {

struct ParsedUrl {
    std::string host_port;  // scheme://host:port for httplib::Client
};

inline ParsedUrl parse_base_url(const std::string& url) {
    if (url.empty()) throw std::invalid_argument("remote scorer base_url not configured");
    return {url};
}

inline AestheticScores parse_scores_json(const std::string& body) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const std::exception& e) {
        throw ScoringError(ScoringError::Kind::malformed_response,
                           std::string("scorer returned invalid JSON: ") + e.what());
    }
    AestheticScores s;
    const char* keys[4] = {"CE", "CU", "PC", "PQ"};
    double* fields[4] = {&s.content_enjoyment, &s.content_usefulness, &s.production_complexity,
                         &s.production_quality};
    for (int i = 0; i < 4; ++i) {
        if (!j.contains(keys[i]) || !j[keys[i]].is_number())
            throw ScoringError(ScoringError::Kind::missing_field,
                               std::string("scorer response missing field ") + keys[i]);
        *fields[i] = j[keys[i]].get<double>();
    }
    if (!s.valid())
        throw ScoringError(ScoringError::Kind::malformed_response,
                           "scorer response out of the [0,10] rating range");
    return s;
}

}  // namespace detail

// POSTs the clip as WAV to {base_url}/score and parses the four-axis JSON
// reply. Transient failures (transport errors, 5xx) are retried up to
// max_retries times with exponential backoff; anything else fails loudly so
// the training step aborts instead of silently substituting a reward.
inline AestheticScores score_remote(const AudioClip& clip, const RemoteScorerConfig& cfg,
                                    int* attempts_out = nullptr) {
    const auto url = detail::parse_base_url(cfg.base_url);
    const std::vector<uint8_t> wav = write_wav(clip);
    const std::string body(reinterpret_cast<const char*>(wav.data()), wav.size());

    std::string last_error;
    ScoringError::Kind last_kind = ScoringError::Kind::connection;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempts_out) *attempts_out = attempt + 1;
        if (attempt > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(50 << (attempt - 1)));

        httplib::Client client(url.host_port);
        client.set_connection_timeout(0, cfg.timeout_ms * 1000);
        client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
        client.set_write_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
        if (!cfg.bearer_token.empty()) client.set_bearer_token_auth(cfg.bearer_token);

        auto res = client.Post("/score", body, "audio/wav");
        if (!res) {
            const auto err = res.error();
            const bool is_timeout = err == httplib::Error::ConnectionTimeout ||
                                    err == httplib::Error::Read || err == httplib::Error::Write;
            last_kind = is_timeout ? ScoringError::Kind::timeout : ScoringError::Kind::connection;
            last_error = "transport error: " + httplib::to_string(err);
            continue;  // transient, retry
        }
        if (res->status >= 500) {
            last_kind = ScoringError::Kind::http_status;
            last_error = "scorer returned status " + std::to_string(res->status);
            continue;  // transient, retry
        }
        if (res->status != 200)
            throw ScoringError(ScoringError::Kind::http_status,
                               "scorer returned status " + std::to_string(res->status));
        return detail::parse_scores_json(res->body);
    }
    throw ScoringError(last_kind, last_error + " after " + std::to_string(cfg.max_retries + 1) +
                                      " attempts");
}

}  // namespace miditune
