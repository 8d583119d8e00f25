#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sae/csv.hpp"
#include "sae/errors.hpp"
#include "sae/quantile.hpp"

namespace sae::svg {

using json = nlohmann::json;

/// One outer ring (or hole) in lon/lat order.
using Ring = std::vector<std::array<double, 2>>;

struct Feature {
    std::string id;
    std::vector<std::vector<Ring>> polygons; // polygon -> rings, first ring outer
};

namespace detail {
inline Ring read_ring(const json& r) {
    Ring out;
    for (const auto& p : r) {
        if (!p.is_array() || p.size() < 2) throw DataError("GeoJSON: malformed coordinate");
        out.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return out;
}

inline std::string feature_id(const json& f, const std::string& key) {
    if (f.contains("properties") && f["properties"].is_object() && f["properties"].contains(key)) {
        const auto& v = f["properties"][key];
        return v.is_string() ? v.get<std::string>() : v.dump();
    }
    if (f.contains("id")) return f["id"].is_string() ? f["id"].get<std::string>() : f["id"].dump();
    throw DataError("GeoJSON: feature without '" + key + "' property or id");
}
} // namespace detail

/// Polygon and MultiPolygon features of a FeatureCollection. The area id is
/// read from `properties[id_key]`, falling back to the feature id.
inline std::vector<Feature> parse_geojson(const json& j, const std::string& id_key = "subarea_id") {
    if (!j.is_object() || j.value("type", "") != "FeatureCollection" || !j.contains("features"))
        throw DataError("GeoJSON: expected a FeatureCollection");
    std::vector<Feature> out;
    for (const auto& f : j["features"]) {
        Feature ft;
        ft.id = detail::feature_id(f, id_key);
        const auto& g = f.at("geometry");
        const std::string type = g.value("type", "");
        if (type == "Polygon") {
            std::vector<Ring> rings;
            for (const auto& r : g.at("coordinates")) rings.push_back(detail::read_ring(r));
            ft.polygons.push_back(std::move(rings));
        } else if (type == "MultiPolygon") {
            for (const auto& poly : g.at("coordinates")) {
                std::vector<Ring> rings;
                for (const auto& r : poly) rings.push_back(detail::read_ring(r));
                ft.polygons.push_back(std::move(rings));
            }
        } else {
            throw DataError("GeoJSON: unsupported geometry type '" + type + "' for feature " + ft.id);
        }
        out.push_back(std::move(ft));
    }
    return out;
}

/// Values of `field` per subarea from an estimates table. Only the "all" rows
/// are used when a group column is present. "qHI_minus_qLO" takes the
/// difference of two quantile columns.
inline std::map<std::string, double> field_values(const csv::Table& t, const std::string& field) {
    const std::size_t id = t.column("subarea_id");
    const bool grouped = t.has_column("group");
    const std::size_t gcol = grouped ? t.column("group") : 0;
    std::size_t a = 0, b = 0;
    bool diff = false;
    if (const auto pos = field.find("_minus_"); pos != std::string::npos && !t.has_column(field)) {
        a = t.column(field.substr(0, pos));
        b = t.column(field.substr(pos + 7));
        diff = true;
    } else {
        a = t.column(field);
    }
    auto num = [](const std::string& s) {
        return s == "NA" || s.empty() ? std::numeric_limits<double>::quiet_NaN() : csv::to_double(s);
    };
    std::map<std::string, double> out;
    for (const auto& r : t.rows) {
        if (grouped && r[gcol] != "all") continue;
        out[r[id]] = diff ? num(r[a]) - num(r[b]) : num(r[a]);
    }
    return out;
}

/// Polygon ids without an estimate and estimate ids without a polygon.
inline std::vector<std::string> unmatched_ids(const std::vector<Feature>& features,
                                              const std::map<std::string, double>& values) {
    std::set<std::string> poly;
    std::vector<std::string> out;
    for (const auto& f : features) {
        poly.insert(f.id);
        if (!values.count(f.id)) out.push_back(f.id);
    }
    for (const auto& [id, v] : values)
        if (!poly.count(id)) out.push_back(id);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline constexpr std::size_t kBins = 5;
inline const std::array<const char*, kBins> kPalette = {"#ffffcc", "#a1dab4", "#41b6c4", "#2c7fb8", "#253494"};
inline const char* kMissingColor = "#d9d9d9";

/// Interior break points at the 20/40/60/80% sample quantiles of the finite values.
inline std::array<double, kBins - 1> quantile_breaks(std::vector<double> v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
    std::array<double, kBins - 1> br{};
    if (v.empty()) {
        br.fill(0.0);
        return br;
    }
    std::sort(v.begin(), v.end());
    for (std::size_t k = 0; k + 1 < kBins; ++k) br[k] = quantile_sorted(v, double(k + 1) / double(kBins));
    return br;
}

inline std::size_t bin_of(double x, const std::array<double, kBins - 1>& br) {
    std::size_t k = 0;
    while (k < br.size() && x > br[k]) ++k;
    return k;
}

namespace detail {
inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}
inline std::string label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}
inline std::string escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else if (c == '"') o += "&quot;";
        else o += c;
    }
    return o;
}
} // namespace detail

struct PlotOptions {
    double width = 640.0;  // map area in px
    double margin = 10.0;
    double legend_width = 170.0;
    std::string title;
};

/// Static choropleth; ids must match exactly (see unmatched_ids).
inline std::string choropleth(const std::vector<Feature>& features, const std::map<std::string, double>& values,
                              const PlotOptions& opt = {}) {
    if (auto bad = unmatched_ids(features, values); !bad.empty()) {
        std::string msg = "polygon and estimate ids do not match; unmatched:";
        for (const auto& b : bad) msg += " " + b;
        throw ValidationError("plot-ids", msg);
    }
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
    for (const auto& f : features)
        for (const auto& poly : f.polygons)
            for (const auto& ring : poly)
                for (const auto& p : ring) {
                    x0 = std::min(x0, p[0]), x1 = std::max(x1, p[0]);
                    y0 = std::min(y0, p[1]), y1 = std::max(y1, p[1]);
                }
    if (!std::isfinite(x0)) throw DataError("GeoJSON: no coordinates");
    const double span = std::max(x1 - x0, y1 - y0) > 0.0 ? std::max(x1 - x0, y1 - y0) : 1.0;
    const double s = opt.width / span;
    const double map_h = (y1 - y0) * s;
    const double top = opt.title.empty() ? 0.0 : 24.0;
    const double W = opt.width + 2 * opt.margin + opt.legend_width;
    const double H = std::max(map_h, 6.0 * 22.0 + 10.0) + 2 * opt.margin + top;

    std::vector<double> v;
    for (const auto& [id, x] : values) v.push_back(x);
    const auto br = quantile_breaks(v);

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::num(W) << "\" height=\"" << detail::num(H)
      << "\" viewBox=\"0 0 " << detail::num(W) << ' ' << detail::num(H) << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!opt.title.empty())
        o << "<text x=\"" << detail::num(opt.margin) << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">"
          << detail::escape(opt.title) << "</text>\n";
    for (const auto& f : features) {
        const double x = values.at(f.id);
        const char* fill = std::isfinite(x) ? kPalette[bin_of(x, br)] : kMissingColor;
        o << "<path id=\"" << detail::escape(f.id) << "\" fill=\"" << fill
          << "\" stroke=\"#555555\" stroke-width=\"0.5\" fill-rule=\"evenodd\" d=\"";
        for (const auto& poly : f.polygons)
            for (const auto& ring : poly) {
                for (std::size_t k = 0; k < ring.size(); ++k)
                    o << (k ? 'L' : 'M') << detail::num(opt.margin + (ring[k][0] - x0) * s) << ','
                      << detail::num(opt.margin + top + (y1 - ring[k][1]) * s);
                o << 'Z';
            }
        o << "\"><title>" << detail::escape(f.id) << ": " << (std::isfinite(x) ? detail::label(x) : "NA")
          << "</title></path>\n";
    }
    const double lx = opt.width + 2 * opt.margin, ly = opt.margin + top;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double x : v)
        if (std::isfinite(x)) lo = std::min(lo, x), hi = std::max(hi, x);
    for (std::size_t k = 0; k < kBins; ++k) {
        const double a = k == 0 ? lo : br[k - 1], b = k + 1 == kBins ? hi : br[k];
        const double y = ly + double(k) * 22.0;
        o << "<rect x=\"" << detail::num(lx) << "\" y=\"" << detail::num(y) << "\" width=\"18\" height=\"18\" fill=\""
          << kPalette[k] << "\" stroke=\"#555555\" stroke-width=\"0.5\"/>\n";
        o << "<text x=\"" << detail::num(lx + 24) << "\" y=\"" << detail::num(y + 13)
          << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::label(a) << " - " << detail::label(b)
          << "</text>\n";
    }
    if (std::any_of(v.begin(), v.end(), [](double x) { return !std::isfinite(x); })) {
        const double y = ly + double(kBins) * 22.0;
        o << "<rect x=\"" << detail::num(lx) << "\" y=\"" << detail::num(y) << "\" width=\"18\" height=\"18\" fill=\""
          << kMissingColor << "\" stroke=\"#555555\" stroke-width=\"0.5\"/>\n";
        o << "<text x=\"" << detail::num(lx + 24) << "\" y=\"" << detail::num(y + 13)
          << "\" font-family=\"sans-serif\" font-size=\"11\">no estimate</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

} // namespace sae::svg
