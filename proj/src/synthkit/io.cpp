#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "unglass/image_io.hpp"
#include "unglass/synthkit.hpp"

namespace unglass {
namespace {

using nlohmann::json;

std::string numbered(const char* prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << std::setw(6) << std::setfill('0') << i << ".png";
  return os.str();
}

json point_json(const Point& p) { return json::array({p.x(), p.y()}); }
Point point_from(const json& j) { return Point(j.at(0).get<double>(), j.at(1).get<double>()); }

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot read " + path.string());
  return json::parse(in);
}

Image binarized(Image m) {
  m.values() = (m.values().array() >= 0.5f).cast<float>();
  return m;
}

}  // namespace

void save_face_records(const std::filesystem::path& dir, const std::vector<FaceRecord>& faces) {
  std::filesystem::create_directories(dir);
  json list = json::array();
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto& f = faces[i];
    const std::string image = numbered("face_", i), shape = numbered("shape_", i);
    write_png(dir / image, f.image);
    write_png(dir / shape, f.face_shape_mask);
    json lm = json::array();
    for (const auto& p : f.landmarks) lm.push_back(point_json(p));
    list.push_back({{"image", image},
                    {"face_shape_mask", shape},
                    {"landmarks", lm},
                    {"identity_id", f.identity_id},
                    {"pose", to_string(f.pose)}});
  }
  write_json(dir / "faces.json", {{"faces", list}});
}

std::vector<FaceRecord> load_face_records(const std::filesystem::path& dir) {
  const json j = read_json(dir / "faces.json");
  std::vector<FaceRecord> faces;
  for (const auto& e : j.at("faces")) {
    FaceRecord f;
    f.image = read_png(dir / e.at("image").get<std::string>());
    if (f.image.channels() != 3) throw DatasetError("face images must be RGB");
    f.face_shape_mask = binarized(read_png(dir / e.at("face_shape_mask").get<std::string>()));
    const auto& lm = e.at("landmarks");
    if (lm.size() != 5) throw DatasetError("expected five landmarks per face");
    for (int k = 0; k < 5; ++k) f.landmarks[k] = point_from(lm.at(k));
    f.identity_id = e.at("identity_id");
    if (f.identity_id < 0) throw DatasetError("identity_id must be >= 0");
    f.pose = e.contains("pose") ? pose_from_string(e.at("pose")) : classify_pose(f.landmarks);
    faces.push_back(std::move(f));
  }
  return faces;
}

void save_template(const std::filesystem::path& dir, const GlassesTemplate& t, std::size_t index) {
  std::filesystem::create_directories(dir);
  const std::string color = numbered("glasses_", index), lens = numbered("lens_", index);
  write_png(dir / color, t.color_layer);
  write_png(dir / lens, t.lens_mask.empty() ? make_image(1, t.color_layer.height(), t.color_layer.width()) : t.lens_mask);
  json sidecar = {{"color_layer", color},
                  {"lens_mask", lens},
                  {"pose", to_string(t.pose)},
                  {"anchor_points", {point_json(t.anchor_points[0]), point_json(t.anchor_points[1])}},
                  {"name", t.name}};
  write_json(dir / std::filesystem::path(color).replace_extension(".json"), sidecar);
}

void save_template_pool(const std::filesystem::path& dir, const std::vector<GlassesTemplate>& pool) {
  for (std::size_t i = 0; i < pool.size(); ++i) save_template(dir, pool[i], i);
}

// One RGBA PNG per template with a JSON sidecar of the same stem.
std::vector<GlassesTemplate> load_template_pool(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DatasetError("template pool " + dir.string() + " is not a directory");
  std::vector<std::filesystem::path> sidecars;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".json" && entry.path().stem().string().rfind("glasses_", 0) == 0) {
      sidecars.push_back(entry.path());
    }
  }
  std::sort(sidecars.begin(), sidecars.end());
  std::vector<GlassesTemplate> pool;
  for (const auto& path : sidecars) {
    const json e = read_json(path);
    GlassesTemplate t;
    const auto color = e.value("color_layer", path.stem().string() + ".png");
    t.color_layer = read_png(dir / color);
    if (t.color_layer.channels() != 4) throw DatasetError("template color layers must be RGBA: " + color);
    t.refresh_mask();
    if (e.contains("lens_mask")) {
      t.lens_mask = binarized(read_png(dir / e.at("lens_mask").get<std::string>()));
      t.lens_mask.values().array() *= t.mask.values().array();
    } else {
      t.lens_mask = make_image(1, t.mask.height(), t.mask.width());
    }
    t.pose = pose_from_string(e.at("pose"));
    t.anchor_points = {point_from(e.at("anchor_points").at(0)), point_from(e.at("anchor_points").at(1))};
    t.name = e.value("name", path.stem().string());
    t.validate();
    pool.push_back(std::move(t));
  }
  if (pool.empty()) throw DatasetError("template pool " + dir.string() + " is empty");
  return pool;
}

}  // namespace unglass
