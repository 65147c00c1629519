// make_fixtures: regenerates the bundled test fixtures.
//
//   make_fixtures <repo-root>
//
// Writes tests/fixtures/{e2e,separable}. The e2e transcript cache is
// recorded by running the real pipeline in RECORD mode against a scripted
// chat transport, so every cached request key is one the pipeline really
// issues. The embedding stores come from a small deterministic encoder
// standing in for the offline exporter.
//
// The scripted model knows the gold annotations but has two systematic
// flaws: it extends weapon designations with the generic noun that follows
// them ("MG5 machine gun"), and without a same-type boxed in-context
// example it misplaces boxes.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gmner/gmner.hpp"

namespace fs = std::filesystem;
using gmner::json;

namespace {

// ---------------------------------------------------------------------------
// Corpus. Markup: [surface|TYPE] or [surface|TYPE|x_min,y_min,x_max,y_max].

constexpr int kImageW = 640;
constexpr int kImageH = 480;

const std::vector<std::string> kSchema{"PER", "ORG", "LOC", "WEAPON"};

const std::map<std::string, std::string> kDescriptions{
    {"PER", "Named people, including a rank or title directly before the name."},
    {"ORG", "Companies, alliances and government bodies."},
    {"LOC", "Countries, cities, regions and military installations."},
    {"WEAPON", "Named weapon systems, aircraft and vehicles."}};

// Pool order matters: the first three carry only WEAPON boxes, so the
// fixed-shot ablation lacks PER and ORG grounding examples.
const std::vector<std::pair<std::string, std::string>> kTrain{
    {"d01", "Soldiers from [NATO|ORG] tested the [Javelin|WEAPON|100,220,420,320] missile near [Riga|LOC]."},
    {"d02", "The [Leopard 2|WEAPON|60,180,560,400] tank rolled through [Warsaw|LOC] on Monday."},
    {"d03", "An [M1 Abrams|WEAPON|40,200,600,430] tank arrived at the port of [Gdansk|LOC]."},
    {"d04", "[General Milley|PER|50,40,200,400] inspected the [MG5|WEAPON|260,200,520,300] machine gun at [Fort Bragg|LOC]."},
    {"d05", "[Lockheed Martin|ORG|20,20,300,80] unveiled the [F-35|WEAPON|150,150,600,380] at an air show in [Texas|LOC]."},
    {"d06", "[Admiral Grady|PER|300,60,460,420] toured a [Boeing|ORG] plant in [Seattle|LOC]."},
    {"d07", "[Rheinmetall|ORG|30,20,330,90] showed the [Lynx|WEAPON|120,160,580,420] vehicle to [Hungary|LOC]."},
    {"d08", "[Secretary Austin|PER|200,50,380,440] met [Raytheon|ORG] executives in [Arlington|LOC]."},
    {"d09", "[Saab|ORG|400,20,620,80] pilots flew the [Gripen|WEAPON|80,100,560,300] fighter over [Sweden|LOC]."},
    {"d10", "[Colonel Reyes|PER|250,80,400,460] demonstrated the [HK416|WEAPON|100,260,520,340] rifle to recruits."},
    {"d11", "[BAE Systems|ORG|50,30,350,100] opened a new factory in [Glasgow|LOC]."},
    {"d12", "Engineers at [Airbus|ORG] upgraded the [Eurofighter|WEAPON|90,120,590,320] jet in [Madrid|LOC]."},
    {"d13", "[Northrop Grumman|ORG|40,20,340,90] delivered radar parts to a base in [New Jersey|LOC]."},
};

const std::vector<std::pair<std::string, std::string>> kTest{
    {"t01", "[General Milley|PER|60,50,210,410] praised the [MG5|WEAPON|250,210,530,310] machine gun during a visit to [Kyiv|LOC]."},
    {"t02", "[Lockheed Martin|ORG|30,20,310,90] will sell [F-16|WEAPON|140,160,590,370] jets to [Romania|LOC]."},
    {"t03", "[Colonel Reyes|PER|240,70,390,450] carried an [HK416|WEAPON|110,250,510,330] rifle in [Kabul|LOC]."},
    {"t04", "[Boeing|ORG|20,20,240,70] delayed the [KC-46|WEAPON|100,140,600,360] tanker again."},
    {"t05", "The [Leopard 2|WEAPON|70,170,570,410] tank crossed into [Lithuania|LOC] at dawn."},
    {"t06", "[General Cavoli|PER|280,60,430,440] briefed [NATO|ORG] ministers in [Brussels|LOC]."},
    {"t07", "[Rheinmetall|ORG|40,30,340,100] will build the [Panther|WEAPON|90,170,590,410] tank in [Italy|LOC]."},
    {"t08", "[Saab|ORG|380,20,600,80] offered the [Gripen|WEAPON|70,110,550,310] fighter to [Colombia|LOC]."},
    {"t09", "Troops fired the [Javelin|WEAPON|120,210,430,310] missile near [Bakhmut|LOC]."},
    {"t10", "[Raytheon|ORG|20,20,280,80] tested the [Patriot|WEAPON|100,150,560,400] system in [New Mexico|LOC]."},
    {"t11", "[Admiral Grady|PER|310,50,470,430] visited sailors in [Norfolk|LOC]."},
    {"t12", "An [M1 Abrams|WEAPON|50,190,610,440] tank was seen in [Poland|LOC] yesterday."},
    {"t13", "[Secretary Austin|PER|190,40,370,430] announced new aid for [Ukraine|LOC]."},
    {"t14", "[Airbus|ORG|30,20,250,80] and [Dassault|ORG] will build the [Rafale|WEAPON|80,130,580,330] fighter."},
    {"t15", "[BAE Systems|ORG|40,20,340,90] delivered the [CV90|WEAPON|100,170,560,410] vehicle to [Slovakia|LOC]."},
    {"t16", "[Major Chen|PER|70,60,220,420] inspected the [MG5|WEAPON|270,190,540,290] machine gun in [Hamburg|LOC]."},
    {"t17", "[General Dynamics|ORG|30,20,330,90] unveiled the [Stryker|WEAPON|90,160,590,420] vehicle in [Detroit|LOC]."},
    {"t18", "[Colonel Park|PER|260,90,410,470] fired the [K2|WEAPON|110,270,530,350] rifle at a range in [Seoul|LOC]."},
    {"t19", "Engineers at [Leonardo|ORG] upgraded the [M-346|WEAPON|80,110,580,310] jet in [Milan|LOC]."},
    {"t20", "[Captain Silva|PER] arrived in [Lisbon|LOC] with the [Tiger|WEAPON|60,90,600,330] helicopter."},
};

// What the scripted LLM draws on when substituting mentions.
const std::map<std::string, std::vector<std::string>> kLexicon{
    {"PER", {"General Cavoli", "Major Chen", "Colonel Park", "Captain Silva", "General Patton", "Admiral Nimitz",
             "Colonel Hayes", "Major Ortiz"}},
    {"ORG", {"General Dynamics", "Leonardo", "Dassault", "Thales", "Northrop Grumman", "Kongsberg", "Hanwha",
             "Embraer"}},
    {"LOC", {"Kyiv", "Romania", "Lithuania", "Brussels", "Italy", "Colombia", "Poland", "Ukraine", "Slovakia",
             "Detroit", "Seoul", "Milan", "Lisbon", "Norfolk", "Hamburg", "Kabul", "Bakhmut", "New Mexico"}},
    {"WEAPON", {"F-16", "KC-46", "Panther", "Patriot", "Rafale", "CV90", "Stryker", "K2", "M-346", "Tiger", "HIMARS",
                "Leopard 1"}},
};

const std::vector<std::string> kGenericNouns{"machine gun", "missile"};

struct Marked {
  std::string id;
  std::string text;
  struct Ent {
    std::size_t start, end;  // byte offsets (corpus is ASCII)
    std::string surface, type;
    std::optional<gmner::BoundingBox> box;
  };
  std::vector<Ent> ents;
};

Marked parse_markup(const std::string& id, const std::string& src) {
  Marked m{id, "", {}};
  std::size_t i = 0;
  while (i < src.size()) {
    if (src[i] != '[') {
      m.text.push_back(src[i++]);
      continue;
    }
    const auto close = src.find(']', i);
    std::vector<std::string> parts;
    std::stringstream ss(src.substr(i + 1, close - i - 1));
    for (std::string p; std::getline(ss, p, '|');) parts.push_back(p);
    Marked::Ent e{m.text.size(), m.text.size() + parts[0].size(), parts[0], parts[1], std::nullopt};
    if (parts.size() > 2) {
      gmner::BoundingBox b;
      std::sscanf(parts[2].c_str(), "%d,%d,%d,%d", &b.x_min, &b.y_min, &b.x_max, &b.y_max);
      e.box = b;
    }
    m.text += parts[0];
    m.ents.push_back(e);
    i = close + 1;
  }
  return m;
}

json to_record(const Marked& m, const std::string& image_path) {
  json ents = json::array();
  for (const auto& e : m.ents) {
    ents.push_back(json{{"char_start", e.start}, {"char_end", e.end}, {"type", e.type}, {"box", gmner::box_to_json(e.box)}});
  }
  return json{{"id", m.id},
              {"text", m.text},
              {"image", {{"path", image_path}, {"width", kImageW}, {"height", kImageH}}},
              {"entities", ents}};
}

// ---------------------------------------------------------------------------
// Toy encoder

std::uint64_t h64(const std::string& s) {
  const auto hex = gmner::sha256_hex(s);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

constexpr std::size_t kIdDims = 32;
constexpr std::size_t kTokenDim = kIdDims + 8 + 8 + 8;

void hash_into(std::vector<double>& v, std::size_t offset, std::size_t width, const std::string& s, double w) {
  const auto h = h64(s);
  v[offset + h % width] += (h >> 32) & 1 ? w : -w;
  v[offset + (h >> 8) % width] += (h >> 40) & 1 ? 0.5 * w : -0.5 * w;
}

bool capitalized(const std::string& s) { return !s.empty() && std::isupper(static_cast<unsigned char>(s[0])); }

std::vector<double> token_vector(const std::vector<gmner::Token>& toks, std::size_t i) {
  std::vector<double> v(kTokenDim, 0.0);
  const auto& s = toks[i].surface;
  hash_into(v, 0, kIdDims, lower(s), 1.0);
  const std::size_t sh = kIdDims;
  v[sh + 0] = capitalized(s) ? 1 : 0;
  v[sh + 1] = s.size() > 1 && std::all_of(s.begin(), s.end(), [](unsigned char c) { return !std::islower(c); }) ? 1 : 0;
  v[sh + 2] = std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }) ? 1 : 0;
  v[sh + 3] = s.find('-') != std::string::npos ? 1 : 0;
  v[sh + 4] = s.size() == 1 && std::ispunct(static_cast<unsigned char>(s[0])) ? 1 : 0;
  v[sh + 5] = !s.empty() && std::islower(static_cast<unsigned char>(s[0])) ? 1 : 0;
  v[sh + 6] = i == 0 ? 1 : 0;
  v[sh + 7] = 1.0;
  const std::size_t pv = sh + 8;
  if (i > 0) {
    hash_into(v, pv, 6, lower(toks[i - 1].surface), 0.5);
    v[pv + 6] = capitalized(toks[i - 1].surface) ? 1 : 0;
  } else {
    v[pv + 7] = 1;
  }
  const std::size_t nx = pv + 8;
  if (i + 1 < toks.size()) {
    hash_into(v, nx, 6, lower(toks[i + 1].surface), 0.5);
    v[nx + 6] = capitalized(toks[i + 1].surface) ? 1 : 0;
  } else {
    v[nx + 7] = 1;
  }
  return v;
}

std::vector<double> text_vector(const std::string& text) {
  std::vector<double> v(kIdDims, 0.0);
  for (const auto& t : gmner::tokenize(text)) hash_into(v, 0, kIdDims, lower(t.surface), 1.0);
  if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) v[0] = 1.0;
  return v;
}

std::vector<double> image_vector(const std::string& path, const std::set<std::string>& visible_types) {
  std::vector<double> v(16, 0.0);
  for (std::size_t k = 0; k < kSchema.size(); ++k) {
    if (visible_types.contains(kSchema[k])) v[k] = 1.0;
  }
  std::mt19937_64 rng(h64(path));
  std::normal_distribution<double> noise(0.0, 0.3);
  for (std::size_t k = 4; k < v.size(); ++k) v[k] = noise(rng);
  return v;
}

void add_sentence_tokens(gmner::EmbeddingStore& store, const std::string& id, const std::string& text) {
  const auto toks = gmner::tokenize(text);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto key = gmner::token_key(id, i);
    if (!store.contains(key)) store.add(key, token_vector(toks, i));
  }
}

// ---------------------------------------------------------------------------
// Scripted chat model

std::string line_after(const std::string& prompt, const std::string& label) {
  const auto pos = prompt.find("\n" + label);
  if (pos == std::string::npos) return "";
  const auto start = pos + 1 + label.size();
  return prompt.substr(start, prompt.find('\n', start) - start);
}

/// Lines `N. "surface" (TYPE)` following `header`.
std::vector<std::pair<std::string, std::string>> numbered_after(const std::string& prompt, const std::string& header) {
  std::vector<std::pair<std::string, std::string>> out;
  auto pos = prompt.find("\n" + header + "\n");
  if (pos == std::string::npos) return out;
  std::stringstream ss(prompt.substr(pos + header.size() + 2));
  for (std::string line; std::getline(ss, line);) {
    const auto q1 = line.find('"');
    const auto q2 = line.rfind('"');
    const auto p1 = line.rfind('(');
    if (line.empty() || !std::isdigit(static_cast<unsigned char>(line[0])) || q1 == q2 || p1 == std::string::npos) break;
    out.emplace_back(line.substr(q1 + 1, q2 - q1 - 1), line.substr(p1 + 1, line.rfind(')') - p1 - 1));
  }
  return out;
}

class ScriptedModel : public gmner::ChatTransport {
 public:
  ScriptedModel(std::vector<Marked> train, std::vector<Marked> test) {
    for (auto& m : train) gold_.emplace(m.text, std::move(m));
    for (auto& m : test) gold_.emplace(m.text, std::move(m));
  }

  gmner::HttpReply post(const std::string& body) override {
    const auto req = json::parse(body);
    const auto& content = req["messages"][0]["content"];
    const auto prompt = content[0]["text"].get<std::string>();
    std::string reply;
    if (prompt.starts_with("### Task: entity tagging")) {
      reply = tag(prompt);
    } else if (prompt.starts_with("### Task: guideline negatives")) {
      reply = negatives(prompt);
    } else if (prompt.starts_with("### Task: guideline descriptions")) {
      reply = descriptions(prompt);
    } else if (prompt.starts_with("### Task: entity substitution")) {
      reply = substitute(prompt);
    } else if (prompt.starts_with("### Task: sentence paraphrase")) {
      reply = paraphrase(prompt);
    } else if (prompt.starts_with("### Task: entity refinement")) {
      reply = refine(prompt);
    } else if (prompt.starts_with("### Task: entity grounding")) {
      reply = ground(prompt);
    } else {
      return gmner::HttpReply{400, "unknown prompt", "", std::nullopt};
    }
    json out{{"choices", json::array({json{{"message", {{"role", "assistant"}, {"content", reply}}}}})}};
    return gmner::HttpReply{200, out.dump(), "", std::nullopt};
  }

  std::string provider_id() const override { return "scripted-fixture-model"; }

 private:
  const Marked* gold(const std::string& text) const {
    auto it = gold_.find(text);
    return it == gold_.end() ? nullptr : &it->second;
  }

  /// The generic-noun flaw: "MG5" followed by "machine gun" becomes "MG5 machine gun".
  static std::string expand_weapon(const std::string& text, const std::string& surface) {
    for (const auto& noun : kGenericNouns) {
      const auto phrase = surface + " " + noun;
      const auto pos = text.find(phrase);
      if (pos != std::string::npos) {
        const auto after = pos + phrase.size();
        if (after == text.size() || !std::isalnum(static_cast<unsigned char>(text[after]))) return phrase;
      }
    }
    return surface;
  }

  std::string tag(const std::string& prompt) const {
    const auto sentence = line_after(prompt, "Sentence: ");
    json ents = json::array();
    if (const auto* g = gold(sentence)) {
      const bool warned = prompt.find("generic category nouns") != std::string::npos;
      for (const auto& e : g->ents) {
        auto surface = e.type == "WEAPON" && !warned ? expand_weapon(sentence, e.surface) : e.surface;
        ents.push_back(json{{"mention", surface}, {"type", e.type}});
      }
    }
    return "```json\n" + json{{"entities", ents}}.dump() + "\n```";
  }

  std::string negatives(const std::string& prompt) const {
    json neg = json::object();
    if (prompt.find("boundary error:") != std::string::npos) {
      neg["WEAPON"] = json::array({"Exclude generic category nouns such as 'machine gun' or 'tank' that follow a "
                                   "model designation; tag only the designation."});
    }
    if (prompt.find("type error:") != std::string::npos) {
      neg["ORG"] = json::array({"Companies named after a rank, such as General Dynamics, are ORG, not PER."});
    }
    return "Analysis of the errors.\n```json\n" + json{{"negatives", neg}}.dump() + "\n```";
  }

  std::string descriptions(const std::string& prompt) const {
    const auto sentence = line_after(prompt, "Sentence: ");
    json des = json::object();
    if (const auto* g = gold(sentence)) {
      std::set<std::string> types;
      for (const auto& e : g->ents) types.insert(e.type);
      for (const auto& t : types) {
        des[t] = kDescriptions.at(t) + " Example: " + [&] {
          for (const auto& e : g->ents) {
            if (e.type == t) return e.surface;
          }
          return std::string();
        }() + ".";
      }
    }
    return "```json\n" + json{{"descriptions", des}}.dump() + "\n```";
  }

  struct Seed {
    const Marked* gold = nullptr;
    std::size_t count = 0;
    std::size_t index = 0;
  };

  Seed seed_of(const std::string& prompt) const {
    Seed s;
    const auto sentence = line_after(prompt, "Sentence: ");
    s.gold = gold(sentence);
    s.count = std::stoul(line_after(prompt, "Count: "));
    s.index = s.gold ? static_cast<std::size_t>(std::stoul(s.gold->id.substr(1))) : 0;
    return s;
  }

  std::string substitute(const std::string& prompt) const {
    const auto seed = seed_of(prompt);
    json samples = json::array();
    if (!seed.gold) return "```json\n[]\n```";
    for (std::size_t k = 0; k < seed.count; ++k) {
      std::string text;
      std::size_t last = 0;
      json ents = json::array();
      for (std::size_t i = 0; i < seed.gold->ents.size(); ++i) {
        const auto& e = seed.gold->ents[i];
        const auto& lex = kLexicon.at(e.type);
        auto pick = lex[(seed.index * 3 + k * 5 + i * 7 + 1) % lex.size()];
        if (pick == e.surface) pick = lex[(seed.index * 3 + k * 5 + i * 7 + 2) % lex.size()];
        text += seed.gold->text.substr(last, e.start - last) + pick;
        last = e.end;
        // one systematically bad generation: an invented type
        const bool bad_type = seed.index == 5 && k == 1 && i == 0;
        ents.push_back(json{{"mention", pick}, {"type", bad_type ? "VEHICLE2" : e.type}});
      }
      text += seed.gold->text.substr(last);
      samples.push_back(json{{"sentence", text}, {"entities", ents}});
    }
    return "```json\n" + json{{"samples", samples}}.dump() + "\n```";
  }

  std::string paraphrase(const std::string& prompt) const {
    const auto seed = seed_of(prompt);
    json samples = json::array();
    if (!seed.gold) return "```json\n[]\n```";
    const auto& g = *seed.gold;
    for (std::size_t k = 0; k < seed.count; ++k) {
      std::string text = g.text;
      if (k % 2 == 0) {
        if (g.ents.empty() || g.ents.front().start != 0) text[0] = static_cast<char>(std::tolower(text[0]));
        text = "Reportedly, " + text;
      } else if (text.ends_with(".")) {
        text = text.substr(0, text.size() - 1) + ", officials said.";
      } else {
        text += " today";
      }
      json ents = json::array();
      for (const auto& e : g.ents) ents.push_back(json{{"mention", e.surface}, {"type", e.type}});
      // one systematically bad generation: a mention dropped from the text
      if (seed.index == 3 && k == 1 && !g.ents.empty()) {
        const auto& e = g.ents.front();
        text = g.text.substr(0, e.start) + "a vehicle" + g.text.substr(e.end);
      }
      samples.push_back(json{{"sentence", text}, {"entities", ents}});
    }
    return "```json\n" + json{{"samples", samples}}.dump() + "\n```";
  }

  std::string refine(const std::string& prompt) const {
    const auto sentence = line_after(prompt, "Sentence: ");
    const auto candidates = numbered_after(prompt, "Candidates:");
    const auto* g = gold(sentence);
    json verdicts = json::array();
    std::string reasoning = "Step 1: the image shows the scene described.\n";
    std::set<std::string> touched;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto& [surface, type] = candidates[i];
      const Marked::Ent* match = nullptr;
      if (g) {
        for (const auto& e : g->ents) {
          if (e.surface.find(surface) != std::string::npos || surface.find(e.surface) != std::string::npos) {
            match = &e;
            break;
          }
        }
      }
      json v{{"id", i}};
      if (!match) {
        v["verdict"] = "DELETE";
        reasoning += "\"" + surface + "\" is not a named entity.\n";
      } else {
        touched.insert(match->surface);
        const auto wanted = match->type == "WEAPON" ? expand_weapon(sentence, match->surface) : match->surface;
        if (wanted == surface && match->type == type) {
          v["verdict"] = "CONFIRM";
        } else {
          v["verdict"] = "CORRECT";
          v["mention"] = wanted;
          v["type"] = match->type;
        }
        reasoning += "\"" + surface + "\" refers to " + wanted + " (" + match->type + ").\n";
      }
      verdicts.push_back(v);
    }
    json add = json::array();
    if (g) {
      for (const auto& e : g->ents) {
        if (e.type != "WEAPON" && !touched.contains(e.surface)) {
          add.push_back(json{{"mention", e.surface}, {"type", e.type}});
        }
      }
    }
    return reasoning + "```json\n" + json{{"verdicts", verdicts}, {"add", add}}.dump() + "\n```";
  }

  std::string ground(const std::string& prompt) const {
    const auto target = prompt.find("Now solve the target.");
    std::set<std::string> boxed_types;
    {
      std::stringstream ss(prompt.substr(0, target));
      for (std::string line; std::getline(ss, line);) {
        if (!line.starts_with("- \"") || line.ends_with("None")) continue;
        const auto p1 = line.rfind('(');
        const auto p2 = line.rfind(')');
        boxed_types.insert(line.substr(p1 + 1, p2 - p1 - 1));
      }
    }
    const auto tail = prompt.substr(target);
    const auto sentence = line_after(tail, "Sentence: ");
    const auto entities = numbered_after(tail, "Entities:");
    const auto* g = gold(sentence);
    json out = json::array();
    for (std::size_t i = 0; i < entities.size(); ++i) {
      const auto& [surface, type] = entities[i];
      json box = nullptr;
      if (g) {
        for (const auto& e : g->ents) {
          if (e.surface != surface && surface.find(e.surface) == std::string::npos) continue;
          if (!e.box) break;
          auto b = *e.box;
          if (boxed_types.contains(type)) {
            b.x_min += 4;
            b.x_max += 4;
          } else {
            const int shift = (b.x_max - b.x_min) * 7 / 10;
            b.x_min += shift;
            b.x_max += shift;
            b.y_min += 40;
            b.y_max += 40;
          }
          box = json::array({b.x_min, b.y_min, b.x_max, b.y_max});
          break;
        }
      }
      out.push_back(json{{"id", i}, {"box", box}});
    }
    return "```json\n" + json{{"groundings", out}}.dump() + "\n```";
  }

  std::map<std::string, Marked> gold_;
};

// ---------------------------------------------------------------------------

const unsigned char kPng[] = {0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A, 0x00, 0x00, 0x00, 0x0D, 0x49, 0x48,
                              0x44, 0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00,
                              0x00, 0x1F, 0x15, 0xC4, 0x89, 0x00, 0x00, 0x00, 0x0A, 0x49, 0x44, 0x41, 0x54, 0x78,
                              0x9C, 0x63, 0x00, 0x01, 0x00, 0x00, 0x05, 0x00, 0x01, 0x0D, 0x0A, 0x2D, 0xB4, 0x00,
                              0x00, 0x00, 0x00, 0x49, 0x45, 0x4E, 0x44, 0xAE, 0x42, 0x60, 0x82};

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

void write_jsonl(const fs::path& p, const std::vector<json>& records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  write_text(p, text);
}

struct Variant {
  std::string name;
  std::vector<std::string> overrides;
};

const std::vector<Variant> kVariants{
    {"full", {}},
    {"no-stage1", {"stages.stage1=false"}},
    {"no-stage2", {"stages.stage2=false"}},
    {"no-stage3", {"stages.stage3=false"}},
    {"fixed-examples", {"stages.example_selection=fixed"}},
};

void make_e2e(const fs::path& root) {
  const auto dir = root / "tests/fixtures/e2e";
  fs::remove_all(dir);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "stores");

  std::vector<Marked> train, test;
  for (const auto& [id, src] : kTrain) train.push_back(parse_markup(id, src));
  for (const auto& [id, src] : kTest) test.push_back(parse_markup(id, src));

  std::vector<json> train_recs, test_recs;
  gmner::EmbeddingStore tokens(gmner::StoreKind::kToken, kTokenDim);
  gmner::EmbeddingStore sentences(gmner::StoreKind::kSentence, kIdDims);
  gmner::EmbeddingStore entities(gmner::StoreKind::kEntity, kIdDims);
  gmner::EmbeddingStore images(gmner::StoreKind::kImage, 16);
  auto add_entity = [&](const std::string& surface) {
    const auto key = gmner::entity_key(surface);
    if (!entities.contains(key)) entities.add(key, text_vector(surface));
  };
  for (auto* set : {&train, &test}) {
    for (const auto& m : *set) {
      const auto image = "images/" + m.id + ".png";
      write_text(dir / image, std::string(reinterpret_cast<const char*>(kPng), sizeof kPng));
      (set == &train ? train_recs : test_recs).push_back(to_record(m, image));
      add_sentence_tokens(tokens, m.id, m.text);
      sentences.add(gmner::sentence_key(m.id), text_vector(m.text));
      std::set<std::string> visible;
      for (const auto& e : m.ents) {
        if (e.box) visible.insert(e.type);
        add_entity(e.surface);
      }
      images.add(gmner::image_key(image), image_vector(image, visible));
      // predicted test mentions may be any token n-gram
      const auto toks = gmner::tokenize(m.text);
      for (std::size_t a = 0; a < toks.size(); ++a) {
        for (std::size_t b = a + 1; b <= std::min(toks.size(), a + 5); ++b) {
          add_entity(m.text.substr(toks[a].byte_start, toks[b - 1].byte_end - toks[a].byte_start));
        }
      }
    }
  }
  write_jsonl(dir / "train.jsonl", train_recs);
  write_jsonl(dir / "test.jsonl", test_recs);
  sentences.save(dir / "stores/sentences.emb");
  entities.save(dir / "stores/entities.emb");
  images.save(dir / "stores/images.emb");

  json schema = json::array();
  for (const auto& t : kSchema) schema.push_back(json{{"type", t}, {"description", kDescriptions.at(t)}});
  json config{{"config_version", 1},
              {"schema", schema},
              {"seed", 13},
              {"paths",
               {{"train", "train.jsonl"},
                {"test", "test.jsonl"},
                {"work_dir", "work"},
                {"prompts", "../../../prompts"},
                {"transcripts", "transcripts.jsonl"},
                {"images", "."},
                {"token_store", "stores/tokens.emb"},
                {"sentence_store", "stores/sentences.emb"},
                {"entity_store", "stores/entities.emb"},
                {"image_store", "stores/images.emb"}}},
              {"train", {{"epochs", 30}, {"batch_size", 8}, {"lr_emission", 0.1}, {"lr_crf", 0.05}, {"weight_decay", 0.0}}},
              {"synthesis", {{"count_per_seed", 2}}}};
  write_text(dir / "pipeline.json", config.dump(2) + "\n");

  auto model = std::make_shared<ScriptedModel>(train, test);
  const auto scratch = fs::temp_directory_path() / "gmner-fixtures";
  fs::remove_all(scratch);

  auto make = [&](const Variant& v, const std::string& mode) {
    auto overrides = v.overrides;
    overrides.push_back("gateway.mode=\"" + mode + "\"");
    overrides.push_back("paths.work_dir=" + json((scratch / (mode + "-" + v.name)).string()).dump());
    return gmner::load_config(dir / "pipeline.json", overrides);
  };

  // Synthesis first: its sentences need token embeddings before training.
  {
    gmner::Pipeline p(make(kVariants[0], "record"), model, &std::cerr);
    p.synthesize();
    for (const auto& rec : p.artifacts().read_jsonl("synthesized.jsonl")) {
      add_sentence_tokens(tokens, rec["id"].get<std::string>(), rec["text"].get<std::string>());
    }
  }
  tokens.save(dir / "stores/tokens.emb");

  json ablation = json::object();
  for (const auto& v : kVariants) {
    gmner::Pipeline rec(make(v, "record"), model, &std::cerr);
    rec.run_all();
    gmner::Pipeline replay(make(v, "replay"), nullptr, &std::cerr);
    const auto report = replay.run_all();
    ablation[v.name] = json{{"gmner_f1", report.gmner.f1()}, {"ner_f1", report.ner.f1()}};
    std::cout << v.name << ": GMNER F1 " << report.gmner.f1() << ", NER F1 " << report.ner.f1() << '\n';
    if (v.name == "full") {
      fs::create_directories(dir / "expected");
      for (const char* f : {"predictions.jsonl", "report.json", "report.txt"}) {
        fs::copy_file(replay.artifacts().path(f), dir / "expected" / f, fs::copy_options::overwrite_existing);
      }
    }
  }
  write_text(dir / "expected/ablation.json", ablation.dump(2) + "\n");
  fs::remove_all(scratch);
}

// ---------------------------------------------------------------------------
// Separable fixture: one-hot token identities, so every labeling is reachable.

void make_separable(const fs::path& root) {
  const auto dir = root / "tests/fixtures/separable";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::vector<std::pair<std::string, std::string>> corpus{
      {"s01", "[Anna Berg|PER] flew to [Oslo|LOC] today."},
      {"s02", "[Oslo|LOC] welcomed [Anna Berg|PER] warmly."},
      {"s03", "The mayor of [Bergen|LOC] is [Lars Moe|PER]."},
      {"s04", "[Lars Moe|PER] met [Anna Berg|PER] in [Bergen|LOC]."},
      {"s05", "Nobody came."},
      {"s06", "[Kari Dahl|PER] left [Tromso|LOC] early."},
      {"s07", "Rain fell on [Tromso|LOC] and [Oslo|LOC]."},
      {"s08", "[Kari Dahl|PER] and [Lars Moe|PER] spoke."},
      {"s09", "The mayor spoke in [Bergen|LOC] today."},
      {"s10", "[Anna Berg|PER] thanked [Kari Dahl|PER]."},
  };
  std::vector<Marked> ms;
  std::map<std::string, std::size_t> vocab;
  for (const auto& [id, src] : corpus) {
    ms.push_back(parse_markup(id, src));
    for (const auto& t : gmner::tokenize(ms.back().text)) vocab.emplace(t.surface, vocab.size());
  }
  gmner::EmbeddingStore tokens(gmner::StoreKind::kToken, vocab.size() + 1);
  std::vector<json> recs;
  for (const auto& m : ms) {
    recs.push_back(to_record(m, "images/" + m.id + ".png"));
    const auto toks = gmner::tokenize(m.text);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      std::vector<double> v(vocab.size() + 1, 0.0);
      v[vocab.at(toks[i].surface)] = 1.0;
      v.back() = 1.0;
      tokens.add(gmner::token_key(m.id, i), v);
    }
  }
  write_jsonl(dir / "train.jsonl", recs);
  tokens.save(dir / "tokens.emb");
  json train{{"epochs", 50}, {"batch_size", 4}, {"lr_emission", 0.5}, {"lr_crf", 0.05}, {"weight_decay", 0.0},
             {"seed", 13}};
  write_text(dir / "train_config.json", json{{"schema", json::array({"PER", "LOC"})}, {"train", train}}.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <repo-root>\n";
    return 2;
  }
  try {
    const fs::path root(argv[1]);
    make_separable(root);
    make_e2e(root);
  } catch (const std::exception& e) {
    std::cerr << "make_fixtures: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
