from __future__ import annotations

import random

import pytest
import requests

import triagebench.gateway as gateway_module
from conftest import make_record
from triagebench.dataset import Demographics, Race, Sex, VitalSigns
from triagebench.gateway import (
    AuthMissingError,
    ExhaustedError,
    Gateway,
    MockKind,
    MockSpec,
    ModelEndpoint,
    mock_predict,
    parse_acuity,
    rule_based_acuity,
)
from triagebench.prompting import Demonstration, PromptBundle


def mock_endpoint(**kwargs):
    defaults = dict(base_url="mock:rule-based", model_name="rule-based")
    defaults.update(kwargs)
    return ModelEndpoint(**defaults)


def bundle_for(record):
    return PromptBundle(
        system_message="You assign acuity.",
        demonstrations=(),
        query_text=f"Chief complaint: {record.chief_complaint}.",
        answer_format_instruction='End with "Acuity: N".',
        query_record=record,
    )


class TestParseAcuity:
    def test_primary_pattern(self):
        assert parse_acuity("thinking step by step... Acuity: 2") == (2, None)

    def test_last_occurrence_wins(self):
        assert parse_acuity("Acuity: 4 ... wait, Acuity: 3") == (3, None)

    def test_case_and_whitespace(self):
        assert parse_acuity("ACUITY :5") == (5, None)

    def test_fallback_last_line_digit(self):
        assert parse_acuity("some reasoning\nthe level should be 4.") == (4, None)

    def test_decimal_not_matched(self):
        assert parse_acuity("score 3.5") == (None, "Unparseable")

    def test_unparseable(self):
        assert parse_acuity("the patient seems fine") == (None, "Unparseable")

    def test_empty(self):
        assert parse_acuity("") == (None, "Unparseable")

    def test_never_raises_on_random_bytes(self):
        rng = random.Random(12)
        for _ in range(2000):
            blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 60)))
            level, err = parse_acuity(blob.decode("latin-1"))
            assert (level is None) != (err is None)


class TestRuleBased:
    def test_normal_vitals_low_pain(self):
        record = make_record(pain=2)
        assert rule_based_acuity(record) == 5

    def test_low_spo2_forces_one(self):
        record = make_record(vitals=VitalSigns(spo2=84.0), pain=0)
        assert rule_based_acuity(record) == 1

    def test_moderate_pain_caps_four(self):
        record = make_record(pain=5)
        assert rule_based_acuity(record) == 4

    def test_tachycardia_caps_three(self):
        record = make_record(vitals=VitalSigns(heart_rate=120.0), pain=0)
        assert rule_based_acuity(record) == 3

    def test_hypotension_caps_two(self):
        record = make_record(vitals=VitalSigns(systolic_bp=85.0), pain=0)
        assert rule_based_acuity(record) == 2

    def test_missing_vitals_skip_rules(self):
        record = make_record(vitals=VitalSigns(), pain=None)
        assert rule_based_acuity(record) == 5


class TestMockPredict:
    def test_biased_offset_applied(self):
        record = make_record(vitals=VitalSigns(heart_rate=120.0), pain=0)  # scores 3
        spec = MockSpec(
            kind=MockKind.BIASED,
            bias_offsets=(((Sex.FEMALE, Race.BLACK), 1.0),),
            bias_application_rate=1.0,
        )
        demo = Demographics(sex=Sex.FEMALE, race=Race.BLACK)
        assert mock_predict(spec, record, demo, seed=0) == 4

    def test_biased_other_groups_untouched(self):
        record = make_record(vitals=VitalSigns(heart_rate=120.0), pain=0)
        spec = MockSpec(
            kind=MockKind.BIASED,
            bias_offsets=(((Sex.FEMALE, Race.BLACK), 1.0),),
            bias_application_rate=1.0,
        )
        demo = Demographics(sex=Sex.MALE, race=Race.WHITE)
        assert mock_predict(spec, record, demo, seed=0) == 3

    def test_clamped_to_range(self):
        record = make_record(pain=2)  # scores 5
        spec = MockSpec(
            kind=MockKind.BIASED,
            bias_offsets=(((Sex.MALE, Race.ASIAN), 3.0),),
            bias_application_rate=1.0,
        )
        assert mock_predict(spec, record, Demographics(Sex.MALE, Race.ASIAN), seed=1) == 5

    def test_rate_zero_never_applies(self):
        record = make_record(pain=2)
        spec = MockSpec(
            kind=MockKind.BIASED,
            bias_offsets=(((Sex.MALE, Race.ASIAN), -2.0),),
            bias_application_rate=0.0,
        )
        assert mock_predict(spec, record, Demographics(Sex.MALE, Race.ASIAN), seed=1) == 5

    def test_draw_depends_on_record_not_variant(self):
        spec = MockSpec(
            kind=MockKind.BIASED,
            bias_offsets=tuple(
                ((sex, race), 1.0) for sex in Sex for race in Race
            ),
            bias_application_rate=0.5,
        )
        record = make_record(vitals=VitalSigns(heart_rate=120.0), pain=0)
        results = {
            mock_predict(spec, record, Demographics(sex, race), seed=7)
            for sex in Sex
            for race in Race
        }
        # One uniform draw per record: either every variant shifts or none.
        assert len(results) == 1


class TestComplete:
    def test_mock_complete_ends_with_acuity(self):
        gateway = Gateway()
        record = make_record(pain=2)
        result = gateway.complete(mock_endpoint(), bundle_for(record))
        assert result.raw_text.endswith("Acuity: 5")
        assert result.parsed == 5
        assert result.parse_error is None

    def test_batch_preserves_order(self):
        gateway = Gateway()
        records = [make_record(f"r{i}", pain=i % 11) for i in range(20)]
        bundles = [bundle_for(r) for r in records]
        results = gateway.complete_batch(mock_endpoint(max_in_flight=8), bundles)
        assert len(results) == 20
        expected = [rule_based_acuity(r) for r in records]
        assert [r.parsed for r in results] == expected

    def test_cache_round_trip(self, tmp_path):
        record = make_record(pain=8)
        first = Gateway(cache_dir=tmp_path).complete(mock_endpoint(), bundle_for(record))
        assert first.from_cache is False

        warm = Gateway(cache_dir=tmp_path)
        second = warm.complete(mock_endpoint(), bundle_for(record))
        assert second.from_cache is True
        assert second.raw_text == first.raw_text
        assert warm.requests_sent == 0
        assert warm.cache_hits == 1

    def test_mock_runs_identical(self, synthetic_small):
        endpoint = mock_endpoint()
        outputs = []
        for _ in range(2):
            gateway = Gateway()
            bundles = [bundle_for(r) for r in synthetic_small.records[:30]]
            outputs.append([c.raw_text for c in gateway.complete_batch(endpoint, bundles)])
        assert outputs[0] == outputs[1]

    def test_auth_missing(self, monkeypatch):
        monkeypatch.delenv("TB_TEST_KEY", raising=False)
        endpoint = ModelEndpoint(
            base_url="http://example.invalid", model_name="m", api_key_env="TB_TEST_KEY"
        )
        with pytest.raises(AuthMissingError):
            Gateway().complete(endpoint, bundle_for(make_record()))


class _FakeResponse:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = "fake"

    def json(self):
        return self._payload


class TestHttpRetry:
    def _endpoint(self, **kwargs):
        defaults = dict(
            base_url="http://fake.test", model_name="m", base_backoff=0.0, max_attempts=3
        )
        defaults.update(kwargs)
        return ModelEndpoint(**defaults)

    def test_429_then_200_succeeds_with_two_attempts(self, monkeypatch):
        responses = [
            _FakeResponse(429),
            _FakeResponse(
                200, {"choices": [{"message": {"content": "Acuity: 2"}}]}
            ),
        ]
        calls = []

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            return responses[len(calls) - 1]

        monkeypatch.setattr(gateway_module.requests, "post", fake_post)
        result = Gateway().complete(self._endpoint(), bundle_for(make_record()))
        assert result.parsed == 2
        assert result.attempts == 2

    def test_persistent_500_exhausts(self, monkeypatch):
        monkeypatch.setattr(
            gateway_module.requests, "post", lambda *a, **k: _FakeResponse(500)
        )
        with pytest.raises(ExhaustedError):
            Gateway().complete(self._endpoint(max_attempts=1), bundle_for(make_record()))

    def test_4xx_fails_fast(self, monkeypatch):
        calls = []

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            return _FakeResponse(400)

        monkeypatch.setattr(gateway_module.requests, "post", fake_post)
        with pytest.raises(gateway_module.GatewayError):
            Gateway().complete(self._endpoint(), bundle_for(make_record()))
        assert len(calls) == 1

    def test_connection_error_retries(self, monkeypatch):
        attempts = []

        def fake_post(url, json=None, headers=None, timeout=None):
            attempts.append(1)
            if len(attempts) < 3:
                raise requests.ConnectionError("refused")
            return _FakeResponse(200, {"choices": [{"message": {"content": "Acuity: 1"}}]})

        monkeypatch.setattr(gateway_module.requests, "post", fake_post)
        result = Gateway().complete(self._endpoint(), bundle_for(make_record()))
        assert result.attempts == 3


class TestEmbed:
    def test_empty_input(self):
        assert Gateway().embed(mock_endpoint(), []) == []

    def test_duplicate_texts_identical_vectors(self):
        vectors = Gateway().embed(mock_endpoint(), ["chest pain", "chest pain"])
        assert vectors[0] == vectors[1]

    def test_second_call_served_from_cache(self, tmp_path):
        endpoint = mock_endpoint()
        gw1 = Gateway(cache_dir=tmp_path)
        first = gw1.embed(endpoint, ["a", "b", "c"])
        assert gw1.requests_sent == 3

        gw2 = Gateway(cache_dir=tmp_path)
        second = gw2.embed(endpoint, ["a", "b", "c"])
        assert second == first
        assert gw2.requests_sent == 0
        assert gw2.cache_hits == 3

    def test_order_preserved(self):
        gateway = Gateway()
        texts = ["alpha", "beta", "gamma"]
        vectors = gateway.embed(mock_endpoint(), texts)
        singles = [gateway.embed(mock_endpoint(), [t])[0] for t in texts]
        assert vectors == singles

    def test_http_embeddings_parsed(self, monkeypatch):
        def fake_post(url, json=None, headers=None, timeout=None):
            data = [
                {"index": i, "embedding": [float(i), 0.0]}
                for i in range(len(json["input"]))
            ]
            return _FakeResponse(200, {"data": data})

        monkeypatch.setattr(gateway_module.requests, "post", fake_post)
        endpoint = ModelEndpoint(base_url="http://fake.test", model_name="e")
        assert Gateway().embed(endpoint, ["x", "y"]) == [[0.0, 0.0], [1.0, 0.0]]
