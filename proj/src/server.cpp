#include "deepsnake/server.hpp"

#include <openssl/evp.h>

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <random>
#include <sstream>

#include "deepsnake/error.hpp"
#include "deepsnake/image_io.hpp"

namespace deepsnake {

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  std::size_t start = 0;
  // Accept data URLs as sent by browsers.
  if (text.rfind("data:", 0) == 0) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw FormatError("malformed data URL");
    start = comma + 1;
  }
  for (std::size_t i = start; i < text.size(); ++i)
    if (!std::isspace(static_cast<unsigned char>(text[i]))) clean.push_back(text[i]);
  if (clean.empty() || clean.size() % 4 != 0) throw FormatError("base64 length must be a positive multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw FormatError("invalid base64 data");
  std::size_t padding = 0;
  if (clean.ends_with("==")) padding = 2;
  else if (clean.ends_with("=")) padding = 1;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

std::shared_ptr<const FlowNet> ModelCache::load(const std::filesystem::path& path) {
  const auto key = std::filesystem::weakly_canonical(path);
  std::lock_guard lock(mu_);
  if (auto it = nets_.find(key); it != nets_.end()) return it->second;
  auto net = std::make_shared<const FlowNet>(load_weights(key));
  nets_.emplace(key, net);
  return net;
}

std::size_t ModelCache::size() const {
  std::lock_guard lock(mu_);
  return nets_.size();
}

std::string to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::Idle: return "idle";
    case SessionStatus::Running: return "running";
    case SessionStatus::Converged: return "converged";
    case SessionStatus::Error: return "error";
  }
  return "unknown";
}

namespace {

nlohmann::json field_json(const FlowField& f) {
  nlohmann::json out = nlohmann::json::array();
  for (const Vec2& v : f) out.push_back({v.x, v.y});
  return out;
}

class ZeroPredictor : public FlowPredictor {
 public:
  FlowField predict(const RasterImage&, const Curve& curve, std::span<const Vec2>) const override {
    return FlowField(curve.size());
  }
  std::string name() const override { return "zero"; }
};

}  // namespace

nlohmann::json to_json(const SessionState& s) {
  return {{"status", to_string(s.status)},
          {"curve", s.curve ? curve_to_json(*s.curve) : nlohmann::json(nullptr)},
          {"raw_flow", field_json(s.raw)},
          {"regularized_flow", field_json(s.regularized)},
          {"displacement", s.displacement},
          {"iteration", s.iteration},
          {"termination", s.termination},
          {"error", s.error.empty() ? nlohmann::json(nullptr) : nlohmann::json(s.error)},
          {"displacements", s.displacements}};
}

Session::Session(std::string id, RasterImage image, std::shared_ptr<const FlowPredictor> predictor,
                 std::string model, EvolutionConfig cfg)
    : id_(std::move(id)),
      image_(std::move(image)),
      predictor_(std::move(predictor)),
      model_(std::move(model)),
      cfg_(cfg) {
  cfg_.validate();
  predictor_->check_image(image_);
}

Session::~Session() {
  stop_ = true;
  join_worker();
}

SessionState Session::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

void Session::claim() {
  std::lock_guard lock(mu_);
  if (busy_) throw Conflict("session " + id_ + " is busy");
  busy_ = true;
}

void Session::join_worker() {
  if (worker_.joinable() && worker_.get_id() != std::this_thread::get_id()) worker_.join();
}

void Session::publish(SessionStatus status) {
  std::lock_guard lock(mu_);
  state_.status = status;
  if (!evolution_) return;
  state_.curve = evolution_->curve();
  state_.raw = evolution_->last_raw();
  state_.regularized = evolution_->last_regularized();
  state_.displacement = evolution_->last_displacement();
  if (evolution_->iteration() > state_.iteration) state_.displacements.push_back(state_.displacement);
  state_.iteration = evolution_->iteration();
  state_.termination = to_string(evolution_->trace().termination);
}

namespace {

SessionStatus settled_status(const Evolution& evo) {
  return evo.trace().termination == Termination::Converged ? SessionStatus::Converged : SessionStatus::Idle;
}

}  // namespace

SessionState Session::set_contour(const std::vector<Vec2>& vertices) {
  claim();
  try {
    if (vertices.size() < 4) throw InvalidArgument("a contour needs at least 4 vertices");
    std::unique_ptr<Evolution> evo;
    try {
      evo = std::make_unique<Evolution>(image_, Curve(vertices), *predictor_, cfg_);
    } catch (const CurveCollapsed& e) {
      throw InvalidArgument(std::string("degenerate contour: ") + e.what());
    }
    {
      std::lock_guard lock(mu_);
      evolution_ = std::move(evo);
      state_ = SessionState{};
    }
    publish(settled_status(*evolution_));
  } catch (...) {
    std::lock_guard lock(mu_);
    busy_ = false;
    throw;
  }
  std::lock_guard lock(mu_);
  busy_ = false;
  return state_;
}

SessionState Session::step(int iterations) {
  if (iterations < 0) throw InvalidArgument("iterations must be non-negative");
  claim();
  if (!evolution_) {
    std::lock_guard lock(mu_);
    busy_ = false;
    throw Conflict("no contour set");
  }
  try {
    for (int i = 0; i < iterations && evolution_->step(); ++i) {
      publish(evolution_->finished() ? settled_status(*evolution_) : SessionStatus::Idle);
    }
  } catch (const CurveCollapsed& e) {
    publish(SessionStatus::Error);
    std::lock_guard lock(mu_);
    state_.error = e.what();
    state_.termination = to_string(Termination::Collapsed);
  } catch (const std::exception& e) {
    publish(SessionStatus::Error);
    std::lock_guard lock(mu_);
    state_.error = e.what();
  }
  std::lock_guard lock(mu_);
  busy_ = false;
  return state_;
}

void Session::run(int max_iterations) {
  if (max_iterations < 0) throw InvalidArgument("max_iterations must be non-negative");
  claim();
  if (!evolution_) {
    std::lock_guard lock(mu_);
    busy_ = false;
    throw Conflict("no contour set");
  }
  join_worker();
  stop_ = false;
  {
    std::lock_guard lock(mu_);
    state_.status = SessionStatus::Running;
  }
  worker_ = std::thread([this, max_iterations] {
    SessionStatus final_status = SessionStatus::Idle;
    try {
      for (int i = 0; i < max_iterations && !stop_ && evolution_->step(); ++i) publish(SessionStatus::Running);
      final_status = evolution_->finished() ? settled_status(*evolution_) : SessionStatus::Idle;
      publish(final_status);
    } catch (const CurveCollapsed& e) {
      publish(SessionStatus::Error);
      std::lock_guard lock(mu_);
      state_.error = e.what();
      state_.termination = to_string(Termination::Collapsed);
    } catch (const std::exception& e) {
      publish(SessionStatus::Error);
      std::lock_guard lock(mu_);
      state_.error = e.what();
    }
    std::lock_guard lock(mu_);
    busy_ = false;
  });
}

SessionState Session::stop() {
  stop_ = true;
  join_worker();
  return state();
}

SessionServer::SessionServer(ServerConfig cfg) : cfg_(std::move(cfg)), http_(std::make_unique<httplib::Server>()) {
  std::random_device rd;
  id_salt_ = (std::uint64_t{rd()} << 32) | rd();
  routes();
}

SessionServer::~SessionServer() { stop(); }

int SessionServer::start() {
  port_ = cfg_.port == 0 ? http_->bind_to_any_port(cfg_.host) : (http_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
  if (port_ < 0) throw Error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return port_;
}

void SessionServer::listen() {
  port_ = cfg_.port;
  if (!http_->listen(cfg_.host, cfg_.port)) throw Error("cannot listen on " + cfg_.host + ":" + std::to_string(cfg_.port));
}

void SessionServer::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
  std::lock_guard lock(mu_);
  sessions_.clear();
}

std::shared_ptr<Session> SessionServer::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("unknown session " + id);
  return it->second;
}

nlohmann::json SessionServer::list_models() const {
  nlohmann::json models = nlohmann::json::array();
  models.push_back({{"name", "oracle"}, {"kind", "oracle"}, {"channels", nullptr}, {"requires_mask", true}});
  models.push_back({{"name", "baseline"}, {"kind", "baseline"}, {"channels", nullptr}, {"requires_mask", true}});
  models.push_back({{"name", "zero"}, {"kind", "debug"}, {"channels", nullptr}, {"requires_mask", false}});
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(cfg_.models_dir)) {
    for (const auto& e : std::filesystem::directory_iterator(cfg_.models_dir))
      if (e.is_regular_file() && e.path().extension() == ".weights") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      const FlowNet net = load_weights(f);
      models.push_back({{"name", f.filename().string()},
                        {"kind", "cnn"},
                        {"channels", net.shape().in_channels},
                        {"requires_mask", false},
                        {"shape", to_json(net.shape())}});
    } catch (const Error&) {
      // Unreadable files are not loadable models.
    }
  }
  return {{"models", models}};
}

std::shared_ptr<const FlowPredictor> SessionServer::make_predictor(const nlohmann::json& body,
                                                                   const RasterImage& image,
                                                                   std::string& model_name) {
  model_name = body.value("model", std::string("zero"));
  auto mask = [&]() {
    if (!body.contains("mask")) throw InvalidArgument("model '" + model_name + "' needs a ground-truth mask");
    const BinaryMask m = to_mask(decode_image(base64_decode(body.at("mask").get<std::string>())));
    if (m.width() != image.width() || m.height() != image.height()) {
      throw InvalidArgument("mask and image extents differ");
    }
    return m;
  };
  std::shared_ptr<const FlowPredictor> predictor;
  if (model_name == "zero") {
    predictor = std::make_shared<ZeroPredictor>();
  } else if (model_name == "oracle") {
    predictor = std::make_shared<OracleSdmPredictor>(signed_distance_map(mask()));
  } else if (model_name == "baseline") {
    predictor = std::make_shared<BaselinePredictor>(estimate_means(image, mask()));
  } else {
    if (model_name.find('/') != std::string::npos || model_name.find('\\') != std::string::npos ||
        model_name.starts_with(".")) {
      throw InvalidArgument("invalid model name '" + model_name + "'");
    }
    const auto path = cfg_.models_dir / model_name;
    if (!std::filesystem::is_regular_file(path)) throw InvalidArgument("unknown model '" + model_name + "'");
    predictor = std::make_shared<CnnPredictor>(models_.load(path), body.value("patch_scale", 1.0));
  }
  if (body.contains("spike")) {
    const auto& spike = body.at("spike");
    predictor = std::make_shared<SpikePredictor>(predictor, spike.value("index", std::size_t{0}),
                                                 spike.value("magnitude", 5.0));
  }
  return predictor;
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& doc) {
  res.status = status;
  res.set_content(doc.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    auto doc = nlohmann::json::parse(req.body);
    if (!doc.is_object()) throw FormatError("request body must be a JSON object");
    return doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed JSON: ") + e.what());
  }
}

// Maps library errors onto HTTP status codes.
template <class F>
httplib::Server::Handler guarded(F f, int invalid_status = 400) {
  return [f, invalid_status](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFound& e) {
      send_error(res, 404, e.what());
    } catch (const Conflict& e) {
      send_error(res, 409, e.what());
    } catch (const FormatError& e) {
      send_error(res, 400, e.what());
    } catch (const InvalidArgument& e) {
      send_error(res, invalid_status, e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

std::vector<Vec2> parse_vertices(const nlohmann::json& body) {
  if (!body.contains("vertices") || !body.at("vertices").is_array()) throw FormatError("missing 'vertices' array");
  std::vector<Vec2> out;
  for (const auto& v : body.at("vertices")) {
    if (!v.is_array() || v.size() != 2) throw FormatError("vertices must be [x, y] pairs");
    out.push_back({v[0].get<double>(), v[1].get<double>()});
  }
  return out;
}

}  // namespace

void SessionServer::routes() {
  auto& s = *http_;

  s.Get("/models", guarded([this](const httplib::Request&, httplib::Response& res) {
          send_json(res, 200, list_models());
        }));

  s.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
           const auto body = parse_body(req);
           if (!body.contains("image")) throw FormatError("missing 'image'");
           RasterImage image;
           try {
             image = decode_image(base64_decode(body.at("image").get<std::string>()));
           } catch (const Error& e) {
             throw FormatError(std::string("undecodable image: ") + e.what());
           }
           std::string model;
           auto predictor = make_predictor(body, image, model);
           const EvolutionConfig cfg =
               body.contains("config") ? evolution_config_from_json(body.at("config")) : EvolutionConfig{};
           std::string id;
           {
             std::lock_guard lock(mu_);
             std::ostringstream os;
             os << std::hex << (id_salt_ ^ (next_id_ * 0x9e3779b97f4a7c15ull)) << "x" << next_id_;
             ++next_id_;
             id = os.str();
           }
           auto session = std::make_shared<Session>(id, std::move(image), std::move(predictor), model, cfg);
           {
             std::lock_guard lock(mu_);
             sessions_.emplace(id, session);
           }
           send_json(res, 201,
                     {{"id", id},
                      {"model", model},
                      {"width", session->image().width()},
                      {"height", session->image().height()},
                      {"channels", session->image().channels()},
                      {"config", to_json(session->config())}});
         }));

  s.Delete(R"(/sessions/([0-9a-zx]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
             std::shared_ptr<Session> session;
             {
               std::lock_guard lock(mu_);
               const auto it = sessions_.find(req.matches[1]);
               if (it == sessions_.end()) throw NotFound("unknown session " + std::string(req.matches[1]));
               session = it->second;
               sessions_.erase(it);
             }
             session->stop();
             res.status = 204;
           }));

  s.Put(R"(/sessions/([0-9a-zx]+)/contour)",
        guarded(
            [this](const httplib::Request& req, httplib::Response& res) {
              auto session = find(req.matches[1]);
              const auto vertices = parse_vertices(parse_body(req));
              send_json(res, 200, to_json(session->set_contour(vertices)));
            },
            422));

  s.Post(R"(/sessions/([0-9a-zx]+)/step)", guarded([this](const httplib::Request& req, httplib::Response& res) {
           auto session = find(req.matches[1]);
           const auto body = parse_body(req);
           send_json(res, 200, to_json(session->step(body.value("iterations", 1))));
         }));

  s.Post(R"(/sessions/([0-9a-zx]+)/run)", guarded([this](const httplib::Request& req, httplib::Response& res) {
           auto session = find(req.matches[1]);
           const auto body = parse_body(req);
           session->run(body.value("max_iterations", session->config().max_iterations));
           send_json(res, 202, to_json(session->state()));
         }));

  s.Get(R"(/sessions/([0-9a-zx]+)/state)", guarded([this](const httplib::Request& req, httplib::Response& res) {
          auto session = find(req.matches[1]);
          auto doc = to_json(session->state());
          doc["id"] = session->id();
          doc["model"] = session->model();
          send_json(res, 200, doc);
        }));

  s.Post(R"(/sessions/([0-9a-zx]+)/stop)", guarded([this](const httplib::Request& req, httplib::Response& res) {
           auto session = find(req.matches[1]);
           send_json(res, 200, to_json(session->stop()));
         }));

  s.Get(R"(/sessions/([0-9a-zx]+)/mask)", guarded([this](const httplib::Request& req, httplib::Response& res) {
          auto session = find(req.matches[1]);
          const auto state = session->state();
          if (!state.curve) throw Conflict("no contour set");
          const auto& img = session->image();
          const auto png = encode_png(to_image(rasterize(*state.curve, img.width(), img.height())));
          res.status = 200;
          res.set_content(std::string(png.begin(), png.end()), "image/png");
        }));

  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, "no such route");
  });
}

}  // namespace deepsnake
