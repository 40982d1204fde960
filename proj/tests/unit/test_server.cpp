#include <doctest.h>
#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>

#include <unistd.h>

#include "deepsnake/error.hpp"
#include "deepsnake/image_io.hpp"
#include "deepsnake/server.hpp"
#include "support/oracles.hpp"

using namespace deepsnake;
using namespace deepsnake::oracle;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

std::string b64(const std::vector<std::uint8_t>& bytes) { return base64_encode(bytes); }

RasterImage disk_image(int size, Vec2 c, double r) {
  const BinaryMask m = disk_mask(size, size, c, r);
  RasterImage img(size, size, 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(x, y) = m.at(x, y) ? 0.8f : 0.2f;
  return img;
}

json circle_json(Vec2 c, double r, int count) {
  json v = json::array();
  for (const Vec2& p : circle_points(c, r, count)) v.push_back({p.x, p.y});
  return {{"vertices", v}};
}

struct Fixture {
  fs::path dir;
  std::unique_ptr<SessionServer> server;
  std::unique_ptr<httplib::Client> client;
  RasterImage image = disk_image(64, {32, 32}, 14);
  BinaryMask mask = disk_mask(64, 64, {32, 32}, 14);

  Fixture() {
    dir = fs::temp_directory_path() / ("deepsnake_server_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    NetShape shape;
    shape.widths = {8, 16, 32, 64};
    shape.hidden = 128;
    FlowNet net(shape);
    net.init_he(3);
    save_weights(net, dir / "small.weights");
    std::ofstream(dir / "junk.weights") << "not a weight file";
    server = std::make_unique<SessionServer>(ServerConfig{"127.0.0.1", 0, dir});
    const int port = server->start();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(30, 0);
  }
  ~Fixture() {
    server->stop();
    fs::remove_all(dir);
  }

  json create(json body) {
    body["image"] = b64(encode_png(image));
    auto res = client->Post("/sessions", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 201);
    return json::parse(res->body);
  }
  std::pair<int, json> call(const std::string& method, const std::string& path, const json& body = json::object()) {
    httplib::Result res = method == "GET"    ? client->Get(path)
                          : method == "PUT"  ? client->Put(path, body.dump(), "application/json")
                          : method == "DELETE" ? client->Delete(path)
                                               : client->Post(path, body.dump(), "application/json");
    REQUIRE(res);
    return {res->status, res->body.empty() ? json() : json::parse(res->body)};
  }
};

}  // namespace

TEST_CASE("base64") {
  const std::string text = "foobar";
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  CHECK(base64_encode(std::span(bytes).first(0)) == "");
  CHECK(base64_encode(std::span(bytes).first(1)) == "Zg==");
  CHECK(base64_encode(std::span(bytes).first(2)) == "Zm8=");
  CHECK(base64_encode(bytes) == "Zm9vYmFy");
  CHECK(base64_decode("Zm9vYmFy") == bytes);
  CHECK(base64_decode("Zm8=") == std::vector<std::uint8_t>{'f', 'o'});
  CHECK(base64_decode("Zg==") == std::vector<std::uint8_t>{'f'});
  CHECK(base64_decode("data:image/png;base64,Zm9v\nYmFy") == bytes);
  std::vector<std::uint8_t> all(256);
  for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
  CHECK(base64_decode(base64_encode(all)) == all);
  CHECK_THROWS_AS(base64_decode("Zm9v!mFy"), FormatError);
  CHECK_THROWS_AS(base64_decode("Zm9"), FormatError);
}

TEST_CASE("http session api") {
  Fixture f;

  SUBCASE("models") {
    auto [status, doc] = f.call("GET", "/models");
    CHECK(status == 200);
    std::vector<std::string> names;
    for (const auto& m : doc.at("models")) names.push_back(m.at("name"));
    CHECK(names == std::vector<std::string>{"oracle", "baseline", "zero", "small.weights"});
    CHECK(doc["models"][3]["channels"] == 1);
  }

  SUBCASE("create errors") {
    CHECK(f.call("POST", "/sessions", {{"image", "@@@"}}).first == 400);
    CHECK(f.call("POST", "/sessions", {{"image", b64({1, 2, 3, 4})}}).first == 400);
    CHECK(f.call("POST", "/sessions", json::object()).first == 400);
    auto res = f.client->Post("/sessions", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body).contains("error"));
    json oracle_without_mask{{"image", b64(encode_png(f.image))}, {"model", "oracle"}};
    CHECK(f.call("POST", "/sessions", oracle_without_mask).first == 400);
    json escape{{"image", b64(encode_png(f.image))}, {"model", "../small.weights"}};
    CHECK(f.call("POST", "/sessions", escape).first == 400);
    json rgb_image{{"image", b64(encode_png(RasterImage(64, 64, 3)))}, {"model", "small.weights"}};
    CHECK(f.call("POST", "/sessions", rgb_image).first == 400);
  }

  SUBCASE("unknown ids and routes") {
    CHECK(f.call("GET", "/sessions/abc/state").first == 404);
    CHECK(f.call("POST", "/sessions/abc/step", {{"iterations", 1}}).first == 404);
    CHECK(f.call("DELETE", "/sessions/abc").first == 404);
    auto [status, doc] = f.call("GET", "/nowhere");
    CHECK(status == 404);
    CHECK(doc.contains("error"));
  }

  SUBCASE("contour, step 0, mask and delete") {
    const json created = f.create({{"model", "zero"}, {"config", {{"points", 32}}}});
    const std::string id = created.at("id");
    CHECK(created.at("width") == 64);
    CHECK(created.at("config").at("points") == 32);
    CHECK(f.call("POST", "/sessions/" + id + "/step", {{"iterations", 1}}).first == 409);
    CHECK(f.call("GET", "/sessions/" + id + "/mask").first == 409);

    CHECK(f.call("PUT", "/sessions/" + id + "/contour", {{"vertices", {{1, 1}, {5, 1}, {5, 5}}}}).first == 422);
    CHECK(f.call("PUT", "/sessions/" + id + "/contour", {{"vertices", 3}}).first == 400);

    const json contour = circle_json({32, 32}, 20, 90);
    auto [status, echoed] = f.call("PUT", "/sessions/" + id + "/contour", contour);
    REQUIRE(status == 200);
    const Curve expected = resample_uniform(curve_from_json(contour), 32);
    CHECK(echoed.at("curve") == curve_to_json(expected));
    CHECK(echoed.at("iteration") == 0);

    auto [s0, stepped] = f.call("POST", "/sessions/" + id + "/step", {{"iterations", 0}});
    CHECK(s0 == 200);
    CHECK(stepped.at("curve") == curve_to_json(expected));
    for (const char* key : {"curve", "raw_flow", "regularized_flow", "displacement", "status"})
      CHECK(stepped.contains(key));

    auto res = f.client->Get("/sessions/" + id + "/mask");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "image/png");
    const BinaryMask got = to_mask(decode_image(std::vector<std::uint8_t>(res->body.begin(), res->body.end())));
    CHECK(got == rasterize(expected, 64, 64));

    CHECK(f.call("DELETE", "/sessions/" + id).first == 204);
    CHECK(f.call("GET", "/sessions/" + id + "/state").first == 404);
  }

  SUBCASE("step n then m equals step n+m") {
    const json body{{"model", "oracle"},
                    {"mask", b64(encode_png(to_image(f.mask)))},
                    {"config", {{"epsilon", 0.0}, {"max_iterations", 50}}}};
    const std::string a = f.create(body).at("id");
    const std::string b = f.create(body).at("id");
    CHECK(a != b);
    const json contour = circle_json({30, 33}, 22, 80);
    f.call("PUT", "/sessions/" + a + "/contour", contour);
    f.call("PUT", "/sessions/" + b + "/contour", contour);
    f.call("POST", "/sessions/" + a + "/step", {{"iterations", 3}});
    for (int i = 0; i < 4; ++i) f.call("POST", "/sessions/" + a + "/step", {{"iterations", 1}});
    const json sa = f.call("GET", "/sessions/" + a + "/state").second;
    const json sb = f.call("POST", "/sessions/" + b + "/step", {{"iterations", 7}}).second;
    CHECK(sa.at("iteration") == 7);
    CHECK(sa.at("curve") == sb.at("curve"));
    CHECK(sa.at("raw_flow") == sb.at("raw_flow"));
    CHECK(sa.at("displacements") == sb.at("displacements"));
    CHECK(sa.at("displacements").size() == 7);

    // Stepping beyond N stops at N.
    const json last = f.call("POST", "/sessions/" + a + "/step", {{"iterations", 500}}).second;
    CHECK(last.at("iteration") == 50);
    CHECK(last.at("termination") == "max_iterations");
    CHECK(last.at("status") == "idle");
  }

  SUBCASE("oracle session converges") {
    const json body{{"model", "oracle"}, {"mask", b64(encode_png(to_image(f.mask)))}};
    const std::string id = f.create(body).at("id");
    f.call("PUT", "/sessions/" + id + "/contour", circle_json({32, 32}, 22, 64));
    const json st = f.call("POST", "/sessions/" + id + "/step", {{"iterations", 300}}).second;
    CHECK(st.at("status") == "converged");
    CHECK(st.at("termination") == "converged");
    CHECK(st.at("iteration") < 300);
  }

  SUBCASE("run, poll latency, conflicts and stop") {
    const std::string id =
        f.create({{"model", "small.weights"}, {"config", {{"epsilon", 0.0}, {"max_iterations", 100000}}}}).at("id");
    f.call("PUT", "/sessions/" + id + "/contour", circle_json({32, 32}, 20, 64));
    auto [status, started] = f.call("POST", "/sessions/" + id + "/run", {{"max_iterations", 100000}});
    CHECK(status == 202);
    CHECK(started.at("status") == "running");

    CHECK(f.call("POST", "/sessions/" + id + "/step", {{"iterations", 1}}).first == 409);
    CHECK(f.call("PUT", "/sessions/" + id + "/contour", circle_json({32, 32}, 20, 64)).first == 409);
    CHECK(f.call("POST", "/sessions/" + id + "/run", json::object()).first == 409);

    double worst_ms = 0;
    int last_iteration = 0;
    for (int i = 0; i < 20; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto [s, doc] = f.call("GET", "/sessions/" + id + "/state");
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      worst_ms = std::max(worst_ms, ms);
      CHECK(s == 200);
      CHECK(doc.at("status") == "running");
      CHECK(doc.at("iteration") >= last_iteration);
      last_iteration = doc.at("iteration");
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    MESSAGE("worst /state latency " << worst_ms << " ms");
    CHECK(worst_ms < 50.0);
    CHECK(last_iteration > 0);

    const json stopped = f.call("POST", "/sessions/" + id + "/stop").second;
    CHECK(stopped.at("status") == "idle");
    const int iterations = stopped.at("iteration");
    CHECK(iterations >= last_iteration);
    CHECK(stopped.at("displacements").size() == static_cast<std::size_t>(iterations));
    CHECK(stopped.at("curve").is_object());
    // Stepping resumes from the preserved state.
    const json more = f.call("POST", "/sessions/" + id + "/step", {{"iterations", 1}}).second;
    CHECK(more.at("iteration") == iterations + 1);
  }

  SUBCASE("spike demo spreads an outlier") {
    const std::string id = f.create({{"model", "zero"}, {"spike", {{"index", 5}, {"magnitude", 8.0}}}}).at("id");
    f.call("PUT", "/sessions/" + id + "/contour", circle_json({32, 32}, 20, 64));
    const json st = f.call("POST", "/sessions/" + id + "/step", {{"iterations", 1}}).second;
    const auto& raw = st.at("raw_flow");
    const auto& reg = st.at("regularized_flow");
    REQUIRE(raw.size() == 64);
    auto norm = [](const json& v) { return std::hypot(v[0].get<double>(), v[1].get<double>()); };
    CHECK(norm(raw[5]) == doctest::Approx(8.0));
    CHECK(norm(raw[6]) == 0.0);
    CHECK(norm(reg[5]) < norm(raw[5]));
    CHECK(norm(reg[6]) > 0.0);
    CHECK(norm(reg[37]) > 0.0);
  }
}
