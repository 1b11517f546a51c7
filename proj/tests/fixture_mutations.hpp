#pragma once

// Malformed variants of the handwritten Manga109-format fixture and the
// element path each must be rejected with.

#include <string>
#include <vector>

namespace osfa::testing {

inline const char* kFixturePath = "fixtures/manga109_fixture.xml";

struct Mutation {
  std::string name;
  std::string from;
  std::string to;
  std::string path;  // expected message prefix
};

inline const std::vector<Mutation>& fixture_mutations() {
  static const std::vector<Mutation> m{
      {"xmin equals xmax", R"(xmin="900" ymin="410" xmax="1010")", R"(xmin="1010" ymin="410" xmax="1010")",
       "book/pages/page[0]/face[1]"},
      {"xmin beyond xmax", R"(xmin="400" ymin="80")", R"(xmin="600" ymin="80")", "book/pages/page[1]/face[0]"},
      {"negative coordinate", R"(xmin="120" ymin="200")", R"(xmin="-5" ymin="200")", "book/pages/page[0]/face[0]"},
      {"dangling character", R"(ymax="250" character="c0001")", R"(ymax="250" character="c0009")",
       "book/pages/page[1]/face[0]"},
      {"missing attribute", R"(id="f0002" xmin="900")", R"(id="f0002" xmn="900")", "book/pages/page[0]/face[1]"},
      {"non-integer coordinate", R"(ymax="350")", R"(ymax="35o")", "book/pages/page[0]/face[0]"},
      {"box exceeds the page", R"(xmax="1010")", R"(xmax="1700")", "book/pages/page[0]/face[1]"},
      {"page without width", R"(<page index="1" width="1654")", R"(<page index="1")", "book/pages/page[1]"},
      {"character without id", R"(<character id="c0002")", R"(<character)", "book/characters/character[1]"},
      {"duplicate character", R"(id="c0002" name="Rival")", R"(id="c0001" name="Rival")",
       "book/characters/character[1]"},
  };
  return m;
}

}  // namespace osfa::testing
