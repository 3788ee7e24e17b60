"""HTTP clients: retry/backoff, rate limiting, config, and the mocks."""

from __future__ import annotations

import random

import numpy as np
import pytest

from textward import clients
from textward.clients import (
    BACKOFF_BASE_SECS,
    ChatClient,
    EndpointConfig,
    HttpStatusError,
    ImageUnreadableError,
    MissingApiKeyError,
    MockChatClient,
    MockEmbedClient,
    MockOcrClient,
    MockVlmClient,
    RateLimiter,
    TransportError,
    hash_embedding,
    join_ocr_lines,
    load_endpoint_configs,
)


class TestEndpointConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EndpointConfig(temperature=-0.1)
        with pytest.raises(ValueError):
            EndpointConfig(top_p=0.0)
        with pytest.raises(ValueError):
            EndpointConfig(top_p=1.2)
        with pytest.raises(ValueError):
            EndpointConfig(max_retries=-1)
        EndpointConfig(temperature=0.0, top_p=1.0, max_retries=0)  # boundaries fine

    def test_load_toml(self, tmp_path):
        cfg = tmp_path / "endpoints.toml"
        cfg.write_text(
            """
[chat]
base_url = "http://localhost:8080/v1"
model_name = "writer-large"
api_key_env = "CHAT_KEY"
temperature = 0.8
top_p = 0.9
max_retries = 4
rpm = 120

[judge]
base_url = "http://localhost:8081/v1"
model_name = "inspector"
"""
        )
        configs = load_endpoint_configs(str(cfg))
        assert set(configs) == {"chat", "judge"}
        chat = configs["chat"]
        assert chat.base_url == "http://localhost:8080/v1"
        assert chat.temperature == 0.8 and chat.top_p == 0.9
        assert chat.max_retries == 4 and chat.rpm == 120
        judge = configs["judge"]
        assert judge.max_retries == 2  # default
        assert judge.rpm is None


class TestRetryLoop:
    def test_recovers_within_budget(self):
        sleeps: list[float] = []
        mock = MockChatClient(
            "ok",
            fail_times=2,
            cfg=EndpointConfig(max_retries=2),
            sleeper=sleeps.append,
            rng=random.Random(7),
        )
        assert mock.chat("s", "u").text == "ok"
        assert len(sleeps) == 2  # two failures, two backoff sleeps

    def test_backoff_windows_double_with_full_jitter(self):
        sleeps: list[float] = []
        mock = MockChatClient(
            "ok",
            fail_times=3,
            cfg=EndpointConfig(max_retries=3),
            sleeper=sleeps.append,
            rng=random.Random(3),
        )
        mock.chat("s", "u")
        assert len(sleeps) == 3
        for i, s in enumerate(sleeps):
            assert 0.0 <= s <= BACKOFF_BASE_SECS * 2**i

    def test_budget_exhaustion_reraises_last_error(self):
        mock = MockChatClient(
            "never", fail_times=-1, cfg=EndpointConfig(max_retries=2)
        )
        with pytest.raises(HttpStatusError) as exc:
            mock.chat("s", "u")
        assert exc.value.status == 503
        assert mock._failures.attempts == 3  # max_retries + 1 attempts total

    def test_zero_retries_single_attempt(self):
        mock = MockChatClient("x", fail_times=1, cfg=EndpointConfig(max_retries=0))
        with pytest.raises(HttpStatusError):
            mock.chat("s", "u")
        assert mock._failures.attempts == 1


class TestRateLimiter:
    def test_disabled_without_rpm(self):
        sleeps: list[float] = []
        limiter = RateLimiter(None, sleeper=sleeps.append)
        for _ in range(100):
            limiter.acquire()
        assert sleeps == []

    def test_sleeps_when_bucket_empty(self, monkeypatch):
        clock = {"now": 1000.0}
        monkeypatch.setattr(clients.time, "monotonic", lambda: clock["now"])
        sleeps: list[float] = []

        def sleeper(s: float) -> None:
            sleeps.append(s)
            clock["now"] += s

        limiter = RateLimiter(rpm=1, sleeper=sleeper)
        limiter.acquire()  # full bucket: no wait
        limiter.acquire()  # empty: must wait one minute at 1 rpm
        assert sleeps == [pytest.approx(60.0)]


class TestRealClientGuards:
    def test_missing_api_key_raised_before_any_request(self, monkeypatch):
        monkeypatch.delenv("TW_TEST_KEY", raising=False)
        client = ChatClient(
            EndpointConfig(base_url="http://127.0.0.1:9", api_key_env="TW_TEST_KEY",
                           max_retries=0),
            sleeper=lambda _s: None,
        )
        with pytest.raises(MissingApiKeyError):
            client.chat("s", "u")

    def test_connection_failure_maps_to_transport_error(self):
        client = ChatClient(
            EndpointConfig(base_url="http://127.0.0.1:9", max_retries=0,
                           timeout_secs=0.2),
            sleeper=lambda _s: None,
        )
        with pytest.raises(TransportError):
            client.chat("s", "u")


class TestMockChat:
    def test_echo_default(self):
        assert MockChatClient().chat("s", "hello").text == "hello"

    def test_list_responder_consumed_in_order_then_repeats(self):
        mock = MockChatClient(["a", "b"])
        assert [mock.chat("s", "u").text for _ in range(3)] == ["a", "b", "b"]

    def test_callable_responder_and_sampling_recorded(self):
        mock = MockChatClient(lambda s, u: f"{s}|{u}", cfg=EndpointConfig(temperature=0.5))
        resp = mock.chat("sys", "usr", temperature=0.85, top_p=0.92)
        assert resp.text == "sys|usr"
        assert mock.calls[-1]["temperature"] == 0.85
        assert mock.calls[-1]["top_p"] == 0.92
        resp2 = mock.chat("sys", "usr")
        assert mock.calls[-1]["temperature"] == 0.5  # falls back to config

    def test_response_text_verbatim(self):
        raw = "  leading and trailing  \n"
        assert MockChatClient(raw).chat("s", "u").text == raw


class TestMockVlm:
    def test_fail_refs_always_raise(self):
        mock = MockVlmClient(
            lambda s, u, ref: "fine",
            fail_refs=("bad.png",),
            cfg=EndpointConfig(max_retries=1),
        )
        assert mock.chat_with_image("s", "u", "good.png").text == "fine"
        with pytest.raises(HttpStatusError):
            mock.chat_with_image("s", "u", "bad.png")


class TestEmbeddings:
    def test_hash_embedding_unit_and_deterministic(self):
        v1 = hash_embedding("winter sale")
        v2 = hash_embedding("winter sale")
        assert np.allclose(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)
        assert not np.allclose(v1, hash_embedding("summer sale"))

    def test_mock_embed_fixed_overrides_and_padding(self):
        mock = MockEmbedClient({"a": [1.0, 0.0], "b": [0.0, 1.0]}, dim=4)
        mat = mock.embed(["a", "b", "c"])
        assert mat.shape[0] == 3
        assert np.allclose(np.linalg.norm(mat, axis=1), 1.0)
        assert mat[0] @ mat[1] == pytest.approx(0.0)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            MockEmbedClient().embed([])


class TestOcr:
    def test_multiline_joined_with_spaces(self):
        assert join_ocr_lines("GRAND\nOPENING\nSOON") == "GRAND OPENING SOON"
        mock = MockOcrClient({"x.png": "TWO\nLINES"})
        assert mock.ocr("x.png") == "TWO LINES"

    def test_unknown_ref_unreadable_and_not_retried(self):
        mock = MockOcrClient({}, cfg=EndpointConfig(max_retries=3))
        with pytest.raises(ImageUnreadableError):
            mock.ocr("missing.png")
        assert mock.calls == ["missing.png"]  # one attempt, no retries

    def test_transport_failures_are_retried(self):
        mock = MockOcrClient({"x.png": "OK"}, fail_times=2, cfg=EndpointConfig(max_retries=2))
        assert mock.ocr("x.png") == "OK"
