// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <regex>
#include <string>

#include "wnet/inference.hpp"

#include <httplib.h>

namespace wnet {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint_dir;
  /// Corpus directory whose style-0 glyphs serve as prototypes.
  std::filesystem::path corpus;
  /// Most characters accepted by one generate request.
  Index max_batch = 64;
  /// Socket read/write timeout in seconds.
  int request_timeout = 30;
  /// Largest accepted request body in bytes.
  std::size_t max_body = 8u << 20;

  void validate() const {
    if (max_batch < 1) throw ConfigError("max request batch must be at least 1");
    if (request_timeout < 1) throw ConfigError("request timeout must be at least 1 second");
    if (port < 0 || port > 65535) throw ConfigError("port out of range");
  }
};

/// Failure carrying an HTTP status and a machine-readable reason.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string reason, const std::string& message)
      : std::runtime_error(message), status_(status), reason_(std::move(reason)) {}
  int status() const noexcept { return status_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  int status_;
  std::string reason_;
};

inline constexpr const char* kCheckpointExtension = ".wnet";

/// Read-only models by checkpoint name; each name is loaded at most once.
class ModelCache {
 public:
  explicit ModelCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  struct Listing {
    std::string name;
    Index epoch = 0;
  };

  /// Checkpoints in the directory, sorted by name.
  std::vector<Listing> list() const {
    std::vector<Listing> out;
    if (!std::filesystem::is_directory(dir_)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (!e.is_regular_file() || e.path().extension() != kCheckpointExtension) continue;
      try {
        out.push_back({e.path().stem().string(), read_checkpoint_epoch(e.path())});
      } catch (const CheckpointError&) {
      }
    }
    std::sort(out.begin(), out.end(), [](const Listing& a, const Listing& b) { return a.name < b.name; });
    return out;
  }

  std::shared_ptr<const InferenceModel> get(const std::string& name) {
    static const std::regex valid("[A-Za-z0-9][A-Za-z0-9._-]*");
    if (!std::regex_match(name, valid)) throw ServiceError(404, "unknown_checkpoint", "unknown checkpoint '" + name + "'");
    const auto path = dir_ / (name + kCheckpointExtension);
    std::shared_ptr<Slot> slot;
    {
      std::lock_guard lock(mutex_);
      auto& s = slots_[name];
      if (!s) s = std::make_shared<Slot>();
      slot = s;
    }
    std::lock_guard lock(slot->mutex);
    if (!slot->model) {
      if (!std::filesystem::is_regular_file(path)) {
        throw ServiceError(404, "unknown_checkpoint", "unknown checkpoint '" + name + "'");
      }
      try {
        slot->model = std::make_shared<const InferenceModel>(load_checkpoint(path));
      } catch (const CheckpointError& e) {
        throw ServiceError(500, "checkpoint_unreadable", e.what());
      }
    }
    return slot->model;
  }

 private:
  struct Slot {
    std::mutex mutex;
    std::shared_ptr<const InferenceModel> model;
  };
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
};

/// Parses "1,2, 3" (or a JSON array) into character ids.
inline std::vector<int> parse_char_list(const std::string& text) {
  std::string s = text;
  std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '[' || c == ']'; }, ' ');
  std::istringstream in(s);
  std::vector<int> out;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw ServiceError(400, "malformed_chars", "not a character id: '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ServiceError(400, "malformed_chars", "no character ids given");
  return out;
}

/// The HTTP inference service: routes, validation and JSON rendering.
class GlyphService {
 public:
  explicit GlyphService(ServiceConfig cfg) : cfg_(std::move(cfg)), cache_(cfg_.checkpoint_dir) {
    cfg_.validate();
    corpus_ = std::make_unique<CorpusIndex>(load_corpus(cfg_.corpus));
  }

  const ServiceConfig& config() const noexcept { return cfg_; }

  void install(httplib::Server& server) {
    server.set_read_timeout(cfg_.request_timeout, 0);
    server.set_write_timeout(cfg_.request_timeout, 0);
    server.set_payload_max_length(cfg_.max_body);
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });
    server.Get("/api/checkpoints", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { return checkpoints_json(); });
    });
    server.Get("/api/characters", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { return characters_json(); });
    });
    server.Post("/api/generate", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return generate_json(req); });
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string reason = res.status == 404 ? "not_found"
                                 : res.status == 413 ? "payload_too_large"
                                 : res.status >= 500 ? "internal"
                                                     : "bad_request";
      res.set_content(error_body(reason, httplib::status_message(res.status)), "application/json");
    });
  }

  std::string checkpoints_json() const {
    nlohmann::ordered_json j;
    auto& arr = j["checkpoints"] = nlohmann::ordered_json::array();
    for (const auto& c : cache_.list()) arr.push_back({{"name", c.name}, {"epoch", c.epoch}});
    return j.dump();
  }

  std::string characters_json() const {
    nlohmann::ordered_json j;
    j["characters"] = corpus_->prototype_chars();
    return j.dump();
  }

  std::string generate_json(const httplib::Request& req) {
    if (!req.is_multipart_form_data()) {
      throw ServiceError(400, "not_multipart", "expected multipart/form-data");
    }
    for (const char* field : {"style", "chars", "checkpoint"}) {
      if (!req.has_file(field)) throw ServiceError(400, "missing_field", std::string("missing form field '") + field + "'");
    }
    const auto chars = parse_char_list(req.get_file_value("chars").content);
    if (static_cast<Index>(chars.size()) > cfg_.max_batch) {
      throw ServiceError(413, "batch_too_large",
                         "requested " + std::to_string(chars.size()) + " characters; limit is " +
                             std::to_string(cfg_.max_batch));
    }
    const std::string name = req.get_file_value("checkpoint").content;
    const auto model = cache_.get(name);
    for (int q : chars) {
      if (!corpus_->prototype(q)) {
        throw ServiceError(404, "unknown_character", "no prototype for character " + std::to_string(q));
      }
    }
    Tensor<float> style;
    try {
      const std::string& png = req.get_file_value("style").content;
      style = glyph_from_paper(decode_png(png.data(), png.size()));
    } catch (const std::exception& e) {
      throw ServiceError(400, "invalid_image", std::string("style image: ") + e.what());
    }
    const auto images = one_shot_generate(*model, corpus_.get(), GenerationRequest{std::move(style), chars, {}});
    nlohmann::ordered_json j;
    j["checkpoint"] = name;
    auto& arr = j["images"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < images.size(); ++i) {
      arr.push_back({{"char_id", chars[i]}, {"png", httplib::detail::base64_encode(encode_png(paper_from_glyph(images[i])))}});
    }
    return j.dump();
  }

  static std::string error_body(const std::string& reason, const std::string& message) {
    return nlohmann::ordered_json{{"reason", reason}, {"message", message}}.dump();
  }

 private:
  template <class F>
  static void guarded(httplib::Response& res, F&& body) {
    try {
      res.set_content(body(), "application/json");
      res.status = 200;
    } catch (const ServiceError& e) {
      res.status = e.status();
      res.set_content(error_body(e.reason(), e.what()), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_body("internal", e.what()), "application/json");
    }
  }

  ServiceConfig cfg_;
  mutable ModelCache cache_;
  std::unique_ptr<CorpusIndex> corpus_;
};

}  // namespace wnet
