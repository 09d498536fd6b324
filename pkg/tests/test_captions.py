import json

import httpx
import pytest

from structvis.captions import (
    SPATIAL_FREE_PROMPT,
    CaptionBatchError,
    CaptionCache,
    CaptionError,
    CaptionRequest,
    EndpointConfig,
    MalformedResponse,
    Preset,
    RetriesExhausted,
    build_prompt,
    caption_video,
    request_caption,
    request_payload,
)

CFG = EndpointConfig(base_url="http://mock/v1", model="test-model")
PNG = b"\x89PNG\r\n\x1a\nfakeimage"


def req(frame=0, video="v1", preset="standard", image=None):
    return CaptionRequest(video, frame, image or PNG + bytes([frame % 256]), preset, "test-model")


def reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def scripted(*responses):
    """Transport returning the given responses (or raising exceptions) in order."""
    queue = list(responses)
    calls = []

    def handler(request):
        calls.append(request)
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    return httpx.Client(transport=httpx.MockTransport(handler)), calls


class TestPrompt:
    def test_spatial_free_verbatim(self):
        assert build_prompt("spatial_free") == (
            "Faithfully describe the content of the above image, avoid mentioning specific objects and try "
            "your best to provide a scene-level, holistic summary. No mention of any spatial information."
        )
        assert build_prompt(Preset.SPATIAL_FREE) == SPATIAL_FREE_PROMPT

    def test_standard_default_and_override(self):
        assert build_prompt("standard") == "Describe this image in detail."
        assert build_prompt("standard", "Caption this.") == "Caption this."

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            CaptionRequest("v", 0, PNG, "poetic")

    def test_empty_image(self):
        with pytest.raises(ValueError):
            CaptionRequest("v", 0, b"")

    def test_payload_shape(self):
        body = request_payload(req(preset="spatial_free"), CFG)
        content = body["messages"][0]["content"]
        assert body["model"] == "test-model"
        assert content[0]["image_url"]["url"].startswith("data:image/png;base64,")
        assert content[1] == {"type": "text", "text": SPATIAL_FREE_PROMPT}


class TestRequest:
    def test_strips_content(self):
        client, calls = scripted(reply("  A cat.\n"))
        assert request_caption(req(), CFG, client=client) == "A cat."
        assert calls[0].url == "http://mock/v1/chat/completions"

    def test_auth_header(self, monkeypatch):
        monkeypatch.setenv("STRUCTVIS_API_KEY", "sekrit")
        client, calls = scripted(reply("x"))
        request_caption(req(), CFG, client=client)
        assert calls[0].headers["authorization"] == "Bearer sekrit"

    def test_retries_then_succeeds(self):
        delays = []
        client, calls = scripted(httpx.Response(503), httpx.ConnectError("down"), reply("ok"))
        assert request_caption(req(), CFG, client=client, sleep=delays.append) == "ok"
        assert len(calls) == 3 and delays == [1.0, 2.0]

    def test_rate_limit_is_transient(self):
        client, _ = scripted(httpx.Response(429), reply("ok"))
        assert request_caption(req(), CFG, client=client, sleep=lambda s: None) == "ok"

    def test_exhaustion(self):
        delays = []
        client, calls = scripted(*[httpx.Response(500)] * 5)
        with pytest.raises(RetriesExhausted) as info:
            request_caption(req(frame=4), CFG, client=client, sleep=delays.append)
        assert len(calls) == 5 and delays == [1.0, 2.0, 4.0, 8.0]
        assert info.value.key[:2] == ("v1", 4)
        assert "video_id='v1', frame=4" in str(info.value)

    def test_client_error_not_retried(self):
        client, calls = scripted(httpx.Response(400))
        with pytest.raises(CaptionError):
            request_caption(req(), CFG, client=client, sleep=lambda s: None)
        assert len(calls) == 1

    @pytest.mark.parametrize(
        "response",
        [
            httpx.Response(200, text="not json"),
            httpx.Response(200, json={"choices": []}),
            httpx.Response(200, json={"choices": [{"message": {"content": None}}]}),
        ],
    )
    def test_malformed(self, response):
        client, _ = scripted(response)
        with pytest.raises(MalformedResponse) as info:
            request_caption(req(frame=2), CFG, client=client)
        assert info.value.key[:2] == ("v1", 2)


class TestCache:
    def test_never_overwrites(self):
        cache = CaptionCache()
        cache.put(("v", 0, "standard", "m"), "a")
        with pytest.raises(KeyError):
            cache.put(("v", 0, "standard", "m"), "b")
        assert cache.get(("v", 0, "standard", "m")) == "a"

    def test_replay(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = CaptionCache(path)
        for i in range(5):
            cache.put(("v", i, "spatial_free", "m"), f"caption {i} ünïcode")
        assert CaptionCache(path).snapshot() == cache.snapshot()
        lines = path.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0]) == {"video_id": "v", "frame": 0, "preset": "spatial_free", "model": "m", "caption": "caption 0 ünïcode"}

    def test_bad_record_names_line(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text('{"video_id": "v", "frame": 0, "preset": "standard", "model": "m", "caption": "x"}\n{"oops": 1}\n')
        with pytest.raises(ValueError, match="cache.jsonl:2"):
            CaptionCache(path)


class TestCaptionVideo:
    def cfg(self, server):
        return EndpointConfig(base_url=server.base_url, model="test-model", timeout=10)

    def test_fetch_and_order(self, mock_server, tmp_path):
        cache = CaptionCache(tmp_path / "c.jsonl")
        frames = [req(i) for i in range(6)]
        out = caption_video(frames, cache, 3, self.cfg(mock_server))
        assert mock_server.calls == 6 and len(cache) == 6
        assert out == [cache.get(r.key) for r in frames]
        assert all(c == c.strip() and c.startswith("caption for") for c in out)
        assert len(set(out)) == 6

    def test_idempotent(self, mock_server, tmp_path):
        path = tmp_path / "c.jsonl"
        frames = [req(i) for i in range(6)]
        first = caption_video(frames, CaptionCache(path), 2, self.cfg(mock_server))
        calls = mock_server.calls
        second = caption_video(frames, CaptionCache(path), 2, self.cfg(mock_server))
        assert first == second and mock_server.calls == calls

    def test_bounded_concurrency(self, mock_server):
        mock_server.delay = 0.05
        frames = [req(i) for i in range(16)]
        caption_video(frames, CaptionCache(), 3, self.cfg(mock_server))
        assert mock_server.max_in_flight <= 3
        assert mock_server.max_in_flight >= 2  # the pool does overlap requests

    def test_partial_failure_then_rerun(self, mock_server, tmp_path):
        path = tmp_path / "c.jsonl"
        frames = [req(i) for i in range(6)]
        bad = request_payload(frames[2], EndpointConfig())["messages"][0]["content"][0]["image_url"]["url"]
        mock_server.always_fail.add(bad)
        no_sleep = lambda s: None
        with pytest.raises(CaptionBatchError) as info:
            caption_video(frames, CaptionCache(path), 2, self.cfg(mock_server), sleep=no_sleep)
        assert list(info.value.failures) == [2]
        assert info.value.captions[2] is None and all(c for i, c in enumerate(info.value.captions) if i != 2)
        assert mock_server.calls == 5 + 5  # five good frames, five attempts on the bad one
        assert len(CaptionCache(path)) == 5

        mock_server.always_fail.clear()
        mock_server.calls = 0
        out = caption_video(frames, CaptionCache(path), 2, self.cfg(mock_server), sleep=no_sleep)
        assert mock_server.calls == 1 and len(out) == 6

    def test_transient_failure_recovers(self, mock_server):
        frames = [req(i) for i in range(3)]
        url = request_payload(frames[1], EndpointConfig())["messages"][0]["content"][0]["image_url"]["url"]
        mock_server.fail_plan[url] = 2
        delays = []
        caption_video(frames, CaptionCache(), 1, self.cfg(mock_server), sleep=delays.append)
        assert mock_server.calls == 5 and delays == [1.0, 2.0]

    def test_duplicate_requests_fetched_once(self, mock_server):
        frames = [req(0), req(0), req(1)]
        out = caption_video(frames, CaptionCache(), 2, self.cfg(mock_server))
        assert mock_server.calls == 2 and out[0] == out[1]

    def test_all_cached_no_network(self):
        cache = CaptionCache()
        frames = [req(i) for i in range(3)]
        for r in frames:
            cache.put(r.key, f"cached {r.frame}")

        def handler(request):
            raise AssertionError("network touched")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        assert caption_video(frames, cache, 2, CFG, client=client) == ["cached 0", "cached 1", "cached 2"]

    def test_max_in_flight_validated(self):
        with pytest.raises(ValueError):
            caption_video([], CaptionCache(), 0)
