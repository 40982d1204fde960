#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deepsnake/error.hpp"
#include "deepsnake/flowengine.hpp"
#include "deepsnake/neuralflow.hpp"

namespace httplib {
class Server;
}

namespace deepsnake {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError for malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Loaded weight files shared across sessions, keyed by canonical path.
class ModelCache {
 public:
  std::shared_ptr<const FlowNet> load(const std::filesystem::path& path);
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::filesystem::path, std::shared_ptr<const FlowNet>> nets_;
};

enum class SessionStatus { Idle, Running, Converged, Error };
std::string to_string(SessionStatus s);

/// Snapshot of a session's evolution, readable without waiting for a step.
struct SessionState {
  SessionStatus status = SessionStatus::Idle;
  std::optional<Curve> curve;
  FlowField raw;
  FlowField regularized;
  double displacement = 0.0;
  int iteration = 0;
  std::string termination = "running";
  std::string error;
  std::vector<double> displacements;  // one per iteration so far
};

nlohmann::json to_json(const SessionState& s);

class Session {
 public:
  Session(std::string id, RasterImage image, std::shared_ptr<const FlowPredictor> predictor,
          std::string model, EvolutionConfig cfg);
  ~Session();

  const std::string& id() const { return id_; }
  const std::string& model() const { return model_; }
  const RasterImage& image() const { return image_; }
  const EvolutionConfig& config() const { return cfg_; }

  SessionState state() const;
  /// Busy is raised as Conflict, a contour with fewer than 4 vertices as
  /// InvalidArgument.
  SessionState set_contour(const std::vector<Vec2>& vertices);
  SessionState step(int iterations);
  void run(int max_iterations);
  SessionState stop();

 private:
  void publish(SessionStatus status);
  void claim();
  void join_worker();

  const std::string id_;
  const RasterImage image_;
  const std::shared_ptr<const FlowPredictor> predictor_;
  const std::string model_;
  const EvolutionConfig cfg_;

  mutable std::mutex mu_;  // guards state_ and busy_
  SessionState state_;
  bool busy_ = false;
  std::unique_ptr<Evolution> evolution_;  // touched only by the holder of busy_
  std::atomic<bool> stop_{false};
  std::thread worker_;
};

/// The session is busy (running, or stepping in another request).
class Conflict : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Directory scanned for *.weights files.
  std::filesystem::path models_dir = "models";
};

/// JSON session API; routes are documented in docs/api.md.
class SessionServer {
 public:
  explicit SessionServer(ServerConfig cfg);
  ~SessionServer();

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start();
  /// Serves on the calling thread until stop().
  void listen();
  void stop();
  int port() const { return port_; }

  std::shared_ptr<Session> find(const std::string& id) const;
  nlohmann::json list_models() const;

 private:
  void routes();
  std::shared_ptr<const FlowPredictor> make_predictor(const nlohmann::json& body, const RasterImage& image,
                                                      std::string& model_name);

  ServerConfig cfg_;
  std::unique_ptr<httplib::Server> http_;
  ModelCache models_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 1;
  std::uint64_t id_salt_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace deepsnake
