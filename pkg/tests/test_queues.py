import threading
import time

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import fast_config
from flowline.queues import (
    PayloadTooLarge,
    QueueUnauthorized,
    StaleReceipt,
    UnknownMessage,
)
from flowline.service import Platform


@pytest.fixture
def q(harness):
    alice = harness.user_id("alice")
    bob = harness.user_id("bob")
    intro = {"active": True, "sub": alice}
    queue = harness.platform.queues.create_queue(
        intro, senders=[alice], receivers=[alice, bob], visibility_timeout=0.3)
    return harness.platform.queues, queue["queue_id"], intro


def intro_for(harness, name):
    return {"active": True, "sub": harness.user_id(name)}


class TestQueueLifecycle:
    def test_defaults(self, harness):
        intro = intro_for(harness, "alice")
        queue = harness.platform.queues.create_queue(intro)
        assert queue["visibility_timeout"] == harness.platform.config.queue_visibility_default
        assert harness.user_id("alice") in queue["admins"]  # creator is always an admin

    def test_idempotent_create_with_client_token(self, harness):
        intro = intro_for(harness, "alice")
        a = harness.platform.queues.create_queue(intro, client_token="same")
        b = harness.platform.queues.create_queue(intro, client_token="same")
        assert a["queue_id"] == b["queue_id"]

    def test_admin_grants_sender_role(self, harness):
        queues = harness.platform.queues
        alice, bob = intro_for(harness, "alice"), intro_for(harness, "bob")
        queue = queues.create_queue(alice)
        with pytest.raises(QueueUnauthorized):
            queues.send(queue["queue_id"], bob, {"x": 1})
        queues.update_queue(queue["queue_id"], alice, senders=[bob["sub"]])
        assert queues.send(queue["queue_id"], bob, {"x": 1})

    def test_non_admin_cannot_update(self, harness):
        queues = harness.platform.queues
        queue = queues.create_queue(intro_for(harness, "alice"))
        with pytest.raises(QueueUnauthorized):
            queues.update_queue(queue["queue_id"], intro_for(harness, "bob"), senders=[])

    def test_payload_cap(self, q):
        queues, queue_id, intro = q
        with pytest.raises(PayloadTooLarge):
            queues.send(queue_id, intro, {"blob": "x" * (256 * 1024 + 1)})


class TestDelivery:
    def test_send_receive_roundtrip(self, q):
        queues, queue_id, intro = q
        message_id = queues.send(queue_id, intro, {"files": ["a.tiff"]})
        got = queues.receive(queue_id, intro, 10)
        assert len(got) == 1
        assert got[0]["message_id"] == message_id
        assert got[0]["payload"] == {"files": ["a.tiff"]}
        assert got[0]["delivery_count"] == 1

    def test_empty_receive(self, q):
        queues, queue_id, intro = q
        assert queues.receive(queue_id, intro, 10) == []

    def test_order_matches_send_order(self, q):
        queues, queue_id, intro = q
        sent = [queues.send(queue_id, intro, {"n": i}) for i in range(50)]
        received = []
        while True:
            batch = queues.receive(queue_id, intro, 7)
            if not batch:
                break
            received.extend(m["message_id"] for m in batch)
        assert received == sent

    def test_unacked_redelivered_after_timeout(self, q):
        queues, queue_id, intro = q
        queues.send(queue_id, intro, {"n": 1})
        first = queues.receive(queue_id, intro, 1)[0]
        assert queues.receive(queue_id, intro, 1) == []  # in flight, invisible
        time.sleep(0.35)
        queues.sweep_once()
        second = queues.receive(queue_id, intro, 1)[0]
        assert second["message_id"] == first["message_id"]
        assert second["delivery_count"] == 2

    def test_redelivery_keeps_original_position(self, q):
        queues, queue_id, intro = q
        first = queues.send(queue_id, intro, {"n": 1})
        second = queues.send(queue_id, intro, {"n": 2})
        got = queues.receive(queue_id, intro, 1)[0]
        assert got["message_id"] == first
        queues.return_message(queue_id, intro, first, got["receipt"])
        order = [m["message_id"] for m in queues.receive(queue_id, intro, 10)]
        assert order == [first, second]

    def test_ack_removes_for_good(self, q):
        queues, queue_id, intro = q
        queues.send(queue_id, intro, {"n": 1})
        got = queues.receive(queue_id, intro, 1)[0]
        queues.ack(queue_id, intro, got["message_id"], got["receipt"])
        time.sleep(0.35)
        queues.sweep_once()
        assert queues.receive(queue_id, intro, 10) == []

    def test_stale_receipt_after_redelivery(self, q):
        """Timeout-race oracle: an old receipt must not delete the message."""
        queues, queue_id, intro = q
        queues.send(queue_id, intro, {"n": 1})
        first = queues.receive(queue_id, intro, 1)[0]
        time.sleep(0.35)
        second = queues.receive(queue_id, intro, 1)[0]  # redelivery, new receipt
        with pytest.raises(StaleReceipt):
            queues.ack(queue_id, intro, first["message_id"], first["receipt"])
        queues.ack(queue_id, intro, second["message_id"], second["receipt"])

    def test_ack_with_current_receipt_after_timeout_but_before_redelivery(self, q):
        queues, queue_id, intro = q
        queues.send(queue_id, intro, {"n": 1})
        got = queues.receive(queue_id, intro, 1)[0]
        time.sleep(0.35)  # timed out, nobody re-received
        queues.ack(queue_id, intro, got["message_id"], got["receipt"])
        assert queues.receive(queue_id, intro, 10) == []

    def test_double_ack_unknown(self, q):
        queues, queue_id, intro = q
        queues.send(queue_id, intro, {"n": 1})
        got = queues.receive(queue_id, intro, 1)[0]
        queues.ack(queue_id, intro, got["message_id"], got["receipt"])
        with pytest.raises(UnknownMessage):
            queues.ack(queue_id, intro, got["message_id"], got["receipt"])

    def test_role_gates(self, q, harness):
        queues, queue_id, _ = q
        carol = intro_for(harness, "carol")
        with pytest.raises(QueueUnauthorized):
            queues.send(queue_id, carol, {"x": 1})
        with pytest.raises(QueueUnauthorized):
            queues.receive(queue_id, carol, 1)

    def test_concurrent_receivers_get_disjoint_messages(self, q, harness):
        queues, queue_id, intro = q
        for i in range(40):
            queues.send(queue_id, intro, {"n": i})
        bob = intro_for(harness, "bob")
        results: dict[str, list] = {"a": [], "b": []}
        barrier = threading.Barrier(2)

        def drain(key, who):
            barrier.wait()
            while True:
                batch = queues.receive(queue_id, who, 5)
                if not batch:
                    return
                results[key].extend(m["message_id"] for m in batch)

        ta = threading.Thread(target=drain, args=("a", intro))
        tb = threading.Thread(target=drain, args=("b", bob))
        ta.start(); tb.start(); ta.join(); tb.join()
        assert not (set(results["a"]) & set(results["b"]))
        assert len(results["a"]) + len(results["b"]) == 40


# -- at-least-once + order property -------------------------------------------------

actions_strategy = st.lists(
    st.one_of(
        st.tuples(st.just("send"), st.integers(0, 999)),
        st.tuples(st.just("receive"), st.integers(1, 5)),
        st.tuples(st.just("ack"), st.integers(0, 9)),        # ack i-th oldest held
        st.tuples(st.just("crash"), st.integers(0, 0)),      # drop all held receipts
        st.tuples(st.just("timeout"), st.integers(0, 0)),    # force visibility expiry
    ),
    min_size=1, max_size=40)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(script=actions_strategy)
def test_at_least_once_and_first_delivery_order(tmp_path_factory, script):
    """Random send/receive/crash schedules: no sent-unacked message is lost,
    and first deliveries happen in send order."""
    tmp_path = tmp_path_factory.mktemp("qprop")
    platform = Platform(fast_config(tmp_path, queue_visibility_default=30.0))
    try:
        authz = platform.authz
        uid = authz.create_principal("prop-user")
        intro = {"active": True, "sub": uid}
        queues = platform.queues
        queue = queues.create_queue(intro, senders=[uid], receivers=[uid])
        qid = queue["queue_id"]

        sent: list[str] = []
        acked: set[str] = set()
        held: list[dict] = []          # receipts the consumer still holds
        first_delivery: list[str] = []
        seen: set[str] = set()

        for op, arg in script:
            if op == "send":
                sent.append(queues.send(qid, intro, {"n": arg}))
            elif op == "receive":
                for msg in queues.receive(qid, intro, arg):
                    if msg["message_id"] not in seen:
                        seen.add(msg["message_id"])
                        first_delivery.append(msg["message_id"])
                    held.append(msg)
            elif op == "ack" and held:
                msg = held.pop(arg % len(held))
                try:
                    queues.ack(qid, intro, msg["message_id"], msg["receipt"])
                    acked.add(msg["message_id"])
                except (StaleReceipt, UnknownMessage):
                    pass  # superseded delivery; the message is still safe
            elif op == "crash":
                held.clear()  # consumer dies holding receipts
            elif op == "timeout":
                with platform.store.tx() as conn:
                    conn.execute("UPDATE queue_messages SET invisible_until=0"
                                 " WHERE state='inflight'")
                queues.sweep_once()

        # Order: first deliveries are a prefix-order-preserving subsequence of sends.
        positions = {mid: i for i, mid in enumerate(sent)}
        indices = [positions[mid] for mid in first_delivery]
        assert indices == sorted(indices)

        # No loss: everything sent and never acked becomes available again.
        with platform.store.tx() as conn:
            conn.execute("UPDATE queue_messages SET invisible_until=0 WHERE state='inflight'")
        queues.sweep_once()
        remaining = set()
        while True:
            batch = queues.receive(qid, intro, 10)
            if not batch:
                break
            for msg in batch:
                remaining.add(msg["message_id"])
        assert remaining == set(sent) - acked
    finally:
        platform.store.close()
