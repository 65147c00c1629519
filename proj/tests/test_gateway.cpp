#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "gmner/http_transport.hpp"
#include "support.hpp"

using namespace gmner;
using namespace gmner::testing;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected gmner::Error";
  return ErrorKind::kIo;
}

std::shared_ptr<StubTransport> unreachable() {
  return std::make_shared<StubTransport>([](const std::string&, std::size_t) -> HttpReply {
    ADD_FAILURE() << "transport must not be called";
    return {};
  });
}

HttpReply status(int code, std::string body = "busy") { return HttpReply{code, std::move(body), "", std::nullopt}; }

}  // namespace

TEST(RequestKey, StableAndSensitiveToSemanticFields) {
  const auto a = ChatRequest::user_text("m", "hello");
  EXPECT_EQ(a.request_key(), ChatRequest::user_text("m", "hello").request_key());
  EXPECT_EQ(a.request_key().size(), 64u);
  EXPECT_NE(a.request_key(), ChatRequest::user_text("m", "hello ").request_key());
  EXPECT_NE(a.request_key(), ChatRequest::user_text("m2", "hello").request_key());
  EXPECT_NE(a.request_key(), ChatRequest::user_text("m", "hello", 0.5).request_key());
  auto b = a;
  b.max_tokens = 7;
  EXPECT_NE(a.request_key(), b.request_key());
}

TEST(RequestKey, CanonicalFormIgnoresFieldOrder) {
  const auto c = ChatRequest::user_text("m", "hi").canonical();
  const auto reordered = json::parse(
      R"({"temperature": 0.0, "messages": [{"content": [{"text": "hi", "type": "text"}], "role": "user"}],
          "max_tokens": 1024, "model": "m"})");
  EXPECT_EQ(c.dump(), reordered.dump());
  EXPECT_EQ(ChatRequest::user_text("m", "hi").request_key(), sha256_hex(reordered.dump()));
}

TEST(RequestKey, ImagesKeyedByPathOrPayloadHash) {
  auto with_path = [](std::string p) {
    auto r = ChatRequest::user_text("m", "x");
    r.messages[0].parts.push_back(ContentPart::of_image_path(std::move(p)));
    return r;
  };
  EXPECT_EQ(with_path("img/a.png").request_key(), with_path("img/a.png").request_key());
  EXPECT_NE(with_path("img/a.png").request_key(), with_path("img/b.png").request_key());
  auto inline_img = ChatRequest::user_text("m", "x");
  ContentPart p;
  p.kind = ContentPart::Kind::kImage;
  p.image_base64 = "AAAA";
  inline_img.messages[0].parts.push_back(p);
  EXPECT_EQ(inline_img.canonical()["messages"][0]["content"][1]["sha256"], sha256_hex("AAAA"));
}

TEST(Gateway, ReplayServesExactStoredString) {
  auto cache = std::make_shared<TranscriptCache>();
  const auto req = ChatRequest::user_text("m", "q");
  const std::string stored = "  exact \n reply\twith {braces} ";
  cache->append(Transcript{req.request_key(), stored, 1.0, "t", "p"});
  LlmGateway gw(fast_gateway(GatewayMode::kReplay), cache, unreachable());
  EXPECT_EQ(gw.complete(req), stored);
  EXPECT_EQ(gw.metrics().cache_hits.load(), 1u);
  EXPECT_EQ(gw.metrics().network_calls.load(), 0u);
}

TEST(Gateway, ReplayMissNamesTheKey) {
  LlmGateway gw(fast_gateway(GatewayMode::kReplay), nullptr, unreachable());
  const auto req = ChatRequest::user_text("m", "unknown");
  try {
    gw.complete(req);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCacheMiss);
    EXPECT_NE(std::string(e.what()).find(req.request_key()), std::string::npos);
  }
}

TEST(Gateway, RecordAppendsAndThenServesFromCache) {
  TempDir dir("rec");
  auto stub = StubTransport::constant("recorded answer");
  {
    LlmGateway gw(fast_gateway(GatewayMode::kRecord), std::make_shared<TranscriptCache>(dir / "t.jsonl"), stub);
    EXPECT_EQ(gw.complete(ChatRequest::user_text("m", "q1")), "recorded answer");
    EXPECT_EQ(gw.complete(ChatRequest::user_text("m", "q1")), "recorded answer");
    EXPECT_EQ(gw.metrics().network_calls.load(), 1u);
  }
  EXPECT_EQ(stub->bodies().size(), 1u);
  TranscriptCache reloaded(dir / "t.jsonl");
  ASSERT_EQ(reloaded.size(), 1u);
  const auto t = reloaded.find(ChatRequest::user_text("m", "q1").request_key());
  ASSERT_TRUE(t);
  EXPECT_EQ(t->response, "recorded answer");
  EXPECT_EQ(t->provider, "stub");

  LlmGateway replay(fast_gateway(GatewayMode::kReplay), std::make_shared<TranscriptCache>(dir / "t.jsonl"),
                    unreachable());
  EXPECT_EQ(replay.complete(ChatRequest::user_text("m", "q1")), "recorded answer");
}

TEST(Gateway, LiveAlwaysCallsTheTransportAndNeverWrites) {
  TempDir dir("live");
  auto stub = StubTransport::constant("fresh");
  auto cache = std::make_shared<TranscriptCache>(dir / "t.jsonl");
  const auto req = ChatRequest::user_text("m", "q");
  cache->append(Transcript{req.request_key(), "stale", 0, "", ""});
  LlmGateway gw(fast_gateway(GatewayMode::kLive), cache, stub);
  EXPECT_EQ(gw.complete(req), "fresh");
  EXPECT_EQ(gw.complete(ChatRequest::user_text("m", "other")), "fresh");
  EXPECT_EQ(stub->bodies().size(), 2u);
  EXPECT_EQ(cache->size(), 1u);
}

TEST(Gateway, RetriesTransientFailures) {
  auto stub = std::make_shared<StubTransport>(
      [](const std::string&, std::size_t call) { return call < 2 ? status(429) : ok_reply("finally"); });
  LlmGateway gw(fast_gateway(GatewayMode::kLive), nullptr, stub);
  EXPECT_EQ(gw.complete(ChatRequest::user_text("m", "q")), "finally");
  EXPECT_EQ(gw.metrics().retries.load(), 2u);
  EXPECT_EQ(gw.metrics().network_calls.load(), 3u);
  EXPECT_EQ(gw.metrics().failures.load(), 0u);
}

TEST(Gateway, GivesUpAfterMaxRetries) {
  auto stub = std::make_shared<StubTransport>([](const std::string&, std::size_t) { return status(503); });
  LlmGateway gw(fast_gateway(GatewayMode::kLive), nullptr, stub);
  EXPECT_EQ(kind_of([&] { gw.complete(ChatRequest::user_text("m", "q")); }), ErrorKind::kHttp);
  EXPECT_EQ(stub->bodies().size(), 4u);  // first try plus 3 retries
  EXPECT_EQ(gw.metrics().failures.load(), 1u);
}

TEST(Gateway, ClientErrorsAreNotRetried) {
  auto stub = std::make_shared<StubTransport>([](const std::string&, std::size_t) { return status(400, "bad"); });
  LlmGateway gw(fast_gateway(GatewayMode::kLive), nullptr, stub);
  EXPECT_EQ(kind_of([&] { gw.complete(ChatRequest::user_text("m", "q")); }), ErrorKind::kHttp);
  EXPECT_EQ(stub->bodies().size(), 1u);
  EXPECT_FALSE(retryable_status(401));
  EXPECT_TRUE(retryable_status(0));
  EXPECT_TRUE(retryable_status(408));
  EXPECT_TRUE(retryable_status(502));
}

TEST(Gateway, MalformedProviderPayload) {
  auto stub = std::make_shared<StubTransport>(
      [](const std::string&, std::size_t) { return HttpReply{200, R"({"choices": []})", "", std::nullopt}; });
  LlmGateway gw(fast_gateway(GatewayMode::kRecord), nullptr, stub);
  EXPECT_EQ(kind_of([&] { gw.complete(ChatRequest::user_text("m", "q")); }), ErrorKind::kProviderPayload);
  EXPECT_EQ(gw.cache().size(), 0u);
  EXPECT_EQ(kind_of([] { parse_provider_reply("not json"); }), ErrorKind::kProviderPayload);
  EXPECT_EQ(parse_provider_reply(
                R"({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]})"),
            "ab");
}

TEST(Gateway, NoTransportConfigured) {
  LlmGateway gw(fast_gateway(GatewayMode::kRecord), nullptr, nullptr);
  EXPECT_EQ(kind_of([&] { gw.complete(ChatRequest::user_text("m", "q")); }), ErrorKind::kConfig);
}

TEST(Gateway, BoundsRequestsInFlight) {
  std::atomic<int> now{0}, peak{0};
  auto stub = std::make_shared<StubTransport>([&](const std::string&, std::size_t) {
    const int v = ++now;
    int p = peak.load();
    while (v > p && !peak.compare_exchange_weak(p, v)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --now;
    return ok_reply("ok");
  });
  auto cfg = fast_gateway(GatewayMode::kLive);
  cfg.max_in_flight = 2;
  LlmGateway gw(cfg, nullptr, stub);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&gw, t] { gw.complete(ChatRequest::user_text("m", std::to_string(t))); });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(stub->bodies().size(), 8u);
  EXPECT_LE(peak.load(), 2);
}

TEST(TranscriptCache, FirstRecordWins) {
  TempDir dir("cache");
  {
    std::ofstream out(dir / "t.jsonl");
    out << R"({"request_key": "k", "response": "first"})" << "\n\n"
        << R"({"request_key": "k", "response": "second"})" << "\n";
  }
  TranscriptCache cache(dir / "t.jsonl");
  EXPECT_EQ(cache.find("k")->response, "first");
  EXPECT_FALSE(cache.append(Transcript{"k", "third", 0, "", ""}));
  EXPECT_TRUE(cache.append(Transcript{"k2", "x", 0, "", ""}));
  EXPECT_EQ(TranscriptCache(dir / "t.jsonl").size(), 2u);
  EXPECT_EQ(TranscriptCache(dir / "missing.jsonl").size(), 0u);

  std::ofstream(dir / "bad.jsonl") << "{\"request_key\": 1}\n";
  EXPECT_EQ(kind_of([&] { TranscriptCache c(dir / "bad.jsonl"); }), ErrorKind::kFormat);
}

TEST(ProviderBody, InlinesImagesFromImageRoot) {
  TempDir dir("img");
  fs::create_directories(dir / "img");
  const std::string bytes = "\x89PNG fake bytes";
  std::ofstream(dir / "img" / "a.png", std::ios::binary) << bytes;
  auto req = ChatRequest::user_text("m", "look");
  req.messages[0].parts.push_back(ContentPart::of_image_path("img/a.png"));

  const auto body = provider_body(req, 1024, dir.path());
  EXPECT_EQ(body["model"], "m");
  EXPECT_EQ(body["stream"], false);
  const auto& parts = body["messages"][0]["content"];
  EXPECT_EQ(parts[0]["text"], "look");
  EXPECT_EQ(parts[1]["image_url"]["url"], "data:image/png;base64," + base64_encode(bytes));

  EXPECT_EQ(kind_of([&] { provider_body(req, 4, dir.path()); }), ErrorKind::kInvalidArgument);
  EXPECT_EQ(kind_of([&] { provider_body(req, 1024, dir / "nowhere"); }), ErrorKind::kIo);
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
}

TEST(Templates, RenderPlaceholdersOnly) {
  EXPECT_EQ(render("a {x} b {\"json\": 1} {y_2}", {{"x", "1"}, {"y_2", "{x}"}}), "a 1 b {\"json\": 1} {x}");
  EXPECT_EQ(kind_of([] { render("{missing}", {}); }), ErrorKind::kFormat);
  PromptTemplates t(prompts_dir());
  for (const auto* name : {"guideline_tag", "guideline_neg", "guideline_des", "synth_substitution", "synth_paraphrase",
                           "refine", "ground"}) {
    EXPECT_FALSE(t.get(name).empty()) << name;
  }
  EXPECT_EQ(kind_of([&] { t.get("nope"); }), ErrorKind::kIo);
}

TEST(ExtractJson, PrefersLastFencedBlock) {
  EXPECT_EQ(*extract_json("think...\n```json\n{\"a\": 1}\n```\nthen\n```json\n{\"a\": 2}\n```"), json({{"a", 2}}));
  EXPECT_EQ(*extract_json("```\n[1, 2]\n```"), json({1, 2}));
  EXPECT_EQ(*extract_json("Answer: {\"a\": {\"b\": 3}} done"), json({{"a", {{"b", 3}}}}));
  EXPECT_FALSE(extract_json("no json here"));
  EXPECT_FALSE(extract_json("{broken"));
  // a broken last block falls back to an earlier one
  EXPECT_EQ(*extract_json("```json\n{\"a\": 1}\n```\n```json\n{oops\n```"), json({{"a", 1}}));
}

TEST(HttpTransport, RetriesAgainstLoopbackServer) {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string auth, path;
  std::mutex mu;
  server.Post(R"(/v1/chat/completions)", [&](const httplib::Request& req, httplib::Response& res) {
    {
      std::lock_guard lock(mu);
      auth = req.get_header_value("Authorization");
      path = req.path;
    }
    if (hits++ < 2) {
      res.status = 429;
      res.set_header("Retry-After", "0");
      res.set_content("slow down", "text/plain");
      return;
    }
    const auto body = json::parse(req.body);
    res.set_content(ok_reply("echo " + body["messages"][0]["content"][0]["text"].get<std::string>()).body,
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto transport =
      std::make_shared<HttpChatTransport>("http://127.0.0.1:" + std::to_string(port) + "/v1/", "secret", 5.0);
  LlmGateway gw(fast_gateway(GatewayMode::kLive), nullptr, transport);
  const auto reply = gw.complete(ChatRequest::user_text("m", "ping"));
  server.stop();
  runner.join();

  EXPECT_EQ(reply, "echo ping");
  EXPECT_EQ(hits.load(), 3);
  EXPECT_EQ(gw.metrics().retries.load(), 2u);
  EXPECT_EQ(auth, "Bearer secret");
  EXPECT_EQ(path, "/v1/chat/completions");
}

TEST(HttpTransport, ConnectionFailureIsRetryableThenFatal) {
  auto transport = std::make_shared<HttpChatTransport>("http://127.0.0.1:1", "", 0.5);
  auto cfg = fast_gateway(GatewayMode::kLive);
  cfg.max_retries = 1;
  LlmGateway gw(cfg, nullptr, transport);
  EXPECT_EQ(kind_of([&] { gw.complete(ChatRequest::user_text("m", "q")); }), ErrorKind::kHttp);
  EXPECT_EQ(gw.metrics().network_calls.load(), 2u);
  EXPECT_EQ(kind_of([] { HttpChatTransport("no-scheme", "", 1.0); }), ErrorKind::kConfig);
}
