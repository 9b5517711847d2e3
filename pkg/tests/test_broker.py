import json
import time

import pytest
from hypothesis import given, settings, strategies as st

from factline.broker import Broker
from factline.errors import BodyTooLarge, LeaseExpired, UnknownJob, UnknownQueue


@pytest.fixture
def broker(tmp_path):
    b = Broker(tmp_path / "broker.db")
    b.register("work")
    return b


class TestPublishConsume:
    def test_fifo_of_one(self, broker):
        job_id = broker.publish("work", "noop", {"x": 1})
        env = broker.consume("work")
        assert env.job_id == job_id and env.body == {"x": 1} and env.attempt == 0

    def test_fifo_order(self, broker):
        ids = [broker.publish("work", "noop", {"i": i}) for i in range(5)]
        got = [broker.consume("work").job_id for _ in range(5)]
        assert got == ids

    def test_unknown_queue(self, broker):
        with pytest.raises(UnknownQueue):
            broker.publish("nope", "noop", {})
        with pytest.raises(UnknownQueue):
            broker.consume("nope")
        with pytest.raises(UnknownQueue):
            broker.depth("nope")

    def test_body_size_boundary(self, broker):
        # largest accepted body: serialized JSON exactly at the configured limit
        overhead = len(json.dumps({"data": ""}, sort_keys=True).encode())
        at_limit = {"data": "x" * (broker.body_limit - overhead)}
        assert len(json.dumps(at_limit, sort_keys=True).encode()) == broker.body_limit
        broker.publish("work", "noop", at_limit)
        with pytest.raises(BodyTooLarge):
            broker.publish("work", "noop", {"data": "x" * (broker.body_limit - overhead + 1)})

    def test_deterministic_id_deduplicates(self, broker):
        broker.publish("work", "noop", {"i": 1}, job_id="fixed")
        broker.publish("work", "noop", {"i": 1}, job_id="fixed")
        assert broker.depth("work") == (1, 0, 0)
        env = broker.consume("work")
        broker.ack(env.job_id, env.receipt)
        # republish of an acked deterministic id stays a no-op
        broker.publish("work", "noop", {"i": 1}, job_id="fixed")
        assert broker.depth("work") == (0, 0, 0)


class TestLeases:
    def test_mutual_exclusion(self, broker):
        broker.publish("work", "noop", {})
        first, second = broker.consume("work"), broker.consume("work")
        assert first is not None and second is None

    def test_redelivery_after_crash(self, broker):
        broker.publish("work", "noop", {})
        env = broker.consume("work", lease=0.0)  # consumer "crashes": never acks
        redelivered = broker.consume("work")
        assert redelivered.job_id == env.job_id and redelivered.attempt == 1

    def test_dead_letter_after_max_attempts(self, broker):
        broker.publish("work", "noop", {})
        for _ in range(broker.max_attempts):
            assert broker.consume("work", lease=0.0) is not None
        assert broker.consume("work") is None
        assert broker.depth("work") == (0, 0, 1)
        dead = broker.dead_letter_jobs("work")
        assert len(dead) == 1 and dead[0].attempt == broker.max_attempts


class TestAckNack:
    def test_ack_decrements_depth(self, broker):
        broker.publish("work", "noop", {})
        env = broker.consume("work")
        assert broker.depth("work") == (0, 1, 0)
        broker.ack(env.job_id, env.receipt)
        assert broker.depth("work") == (0, 0, 0)

    def test_ack_after_lease_expiry(self, broker):
        broker.publish("work", "noop", {})
        env = broker.consume("work", lease=0.0)
        time.sleep(0.01)
        with pytest.raises(LeaseExpired):
            broker.ack(env.job_id, env.receipt)

    def test_stale_receipt_cannot_ack_anothers_lease(self, broker):
        broker.publish("work", "noop", {})
        first = broker.consume("work", lease=0.0)
        second = broker.consume("work")  # re-leased to a second consumer
        with pytest.raises(LeaseExpired):
            broker.ack(first.job_id, first.receipt)
        broker.ack(second.job_id, second.receipt)

    def test_nack_makes_immediately_consumable(self, broker):
        broker.publish("work", "noop", {})
        env = broker.consume("work")
        broker.nack(env.job_id, env.receipt)
        again = broker.consume("work")
        assert again.job_id == env.job_id and again.attempt == 1

    def test_unknown_job(self, broker):
        with pytest.raises(UnknownJob):
            broker.ack("nope")


class TestDepthAndDurability:
    def test_depth_counts(self, broker):
        for i in range(3):
            broker.publish("work", "noop", {"i": i})
        broker.consume("work")
        assert broker.depth("work") == (2, 1, 0)

    def test_empty_depth(self, broker):
        assert broker.depth("work") == (0, 0, 0)

    def test_restart_preserves_jobs_and_demotes_inflight(self, tmp_path):
        path = tmp_path / "broker.db"
        b1 = Broker(path)
        b1.register("work")
        b1.publish("work", "noop", {"i": 0})
        b1.publish("work", "noop", {"i": 1})
        b1.consume("work", lease=3600)

        b2 = Broker(path)
        b2.recover()
        visible, inflight, dead = b2.depth("work")
        assert (visible, inflight, dead) == (2, 0, 0)
        bodies = {b2.consume("work").body["i"] for _ in range(2)}
        assert bodies == {0, 1}


class TestAtLeastOnce:
    @settings(deadline=None, max_examples=20)
    @given(seed=st.integers(min_value=0, max_value=2**32), n_jobs=st.integers(1, 8))
    def test_random_crashes_never_lose_jobs(self, tmp_path_factory, seed, n_jobs):
        import random

        rng = random.Random(seed)
        broker = Broker(tmp_path_factory.mktemp("b") / "broker.db", max_attempts=4)
        broker.register("q")
        published = {broker.publish("q", "noop", {"i": i}) for i in range(n_jobs)}

        delivered: list[str] = []
        acked: set[str] = set()
        for _ in range(500):
            crashed = rng.random() < 0.4  # take an instantly-expiring lease and abandon it
            env = broker.consume("q", lease=0.0 if crashed else 60.0)
            if env is None:
                if broker.idle(["q"]):
                    break
                continue
            delivered.append(env.job_id)
            if crashed:
                continue
            # no double live delivery: an unexpired lease blocks everyone else
            other = broker.consume("q")
            assert other is None or other.job_id != env.job_id
            if other is not None:
                broker.nack(other.job_id, other.receipt)
            if rng.random() < 0.8:
                broker.ack(env.job_id, env.receipt)
                acked.add(env.job_id)
            else:
                broker.nack(env.job_id, env.receipt)

        dead = {j.job_id for j in broker.dead_letter_jobs("q")}
        assert set(delivered) == published          # every job delivered at least once
        assert acked | dead == published            # nothing vanished
        assert broker.depth("q")[:2] == (0, 0)
