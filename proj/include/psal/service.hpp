#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>

#include <json.hpp>

#include "psal/data.hpp"
#include "psal/model.hpp"
#include "psal/profile_index.hpp"
#include "psal/saliency.hpp"

namespace psal {

struct ServiceArtifacts {
  std::filesystem::path checkpoint, dataset, stats, index;
};

/// Loads the four artifacts, verifying the dataset checksum and that the stats
/// were computed for this checkpoint. Missing files raise MissingArtifactError.
struct SessionData {
  Model model;
  PreparedData data;
  ProfileStats stats;
  ProfileIndex index;
};
SessionData load_session(const ServiceArtifacts& artifacts);

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// The /api/v1 surface. Requests are answered by `handle`, which the HTTP
/// server wraps; tests can call it directly. The served model is never
/// modified: what-ifs run on copies.
class Service {
 public:
  explicit Service(SessionData session);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& query, const std::string& body) const;

  /// Blocks until stop(). `on_ready` fires once the socket is bound, with the bound port.
  void serve(const std::string& host, int port, const std::function<void(int)>& on_ready = {});
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace psal
