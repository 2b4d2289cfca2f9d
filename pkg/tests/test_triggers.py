import time

import pytest

from conftest import wait_until
from flowline.exprs import BadExpression
from flowline.triggers import InsufficientScopes


@pytest.fixture
def world(harness):
    """A queue (alice sends, alice receives) and a public echo flow."""
    alice = harness.user_id("alice")
    intro = {"active": True, "sub": alice}
    queue = harness.platform.queues.create_queue(
        intro, senders=[alice], receivers=[alice], visibility_timeout=1.0)
    flow = harness.publish({
        "StartAt": "E", "States": {
            "E": {"Type": "Action",
                  "ActionUrl": harness.platform.provider_url("echo"),
                  "Parameters": {"input_string.$": "$.text"},
                  "ResultPath": "$.echoed", "End": True}}},
        runnable_by=[alice])
    return harness, intro, queue, flow


def trigger_token(harness, queue, flow, user="alice"):
    return harness.token(user, scopes=[queue["receive_scope"], flow["scope"]], consent="all")


class TestDefinition:
    def test_create_parses_expressions(self, world):
        harness, intro, queue, flow = world
        doc = harness.platform.triggers.create_trigger(
            intro, queue_id=queue["queue_id"], action_url=flow["action_url"],
            predicate='filename.endswith(".tiff")',
            template={"number_of_files": "len(files)", "text": "filename"})
        assert doc["state"] == "disabled"

    def test_bad_predicate_position(self, world):
        harness, intro, queue, flow = world
        with pytest.raises(BadExpression) as err:
            harness.platform.triggers.create_trigger(
                intro, queue_id=queue["queue_id"], action_url=flow["action_url"],
                predicate="(filename  ")
        assert err.value.position >= 0

    def test_bad_template_rejected(self, world):
        harness, intro, queue, flow = world
        with pytest.raises(BadExpression):
            harness.platform.triggers.create_trigger(
                intro, queue_id=queue["queue_id"], action_url=flow["action_url"],
                predicate="true", template={"x": "]["})

    def test_enable_requires_both_scopes(self, world):
        harness, intro, queue, flow = world
        triggers = harness.platform.triggers
        doc = triggers.create_trigger(intro, queue_id=queue["queue_id"],
                                      action_url=flow["action_url"], predicate="true")
        queue_only = harness.token("alice", scopes=[queue["receive_scope"]], consent="all")
        with pytest.raises(InsufficientScopes) as err:
            triggers.enable_trigger(doc["trigger_id"], queue_only)
        assert err.value.missing == [flow["scope"]]
        both = trigger_token(harness, queue, flow)
        assert triggers.enable_trigger(doc["trigger_id"], both)["state"] == "enabled"


class TestPolling:
    def make_trigger(self, world, predicate='filename.endswith(".tiff")',
                     template=None, enabled=True):
        harness, intro, queue, flow = world
        triggers = harness.platform.triggers
        doc = triggers.create_trigger(
            intro, queue_id=queue["queue_id"], action_url=flow["action_url"],
            predicate=predicate,
            template=template if template is not None else {"text": "filename"})
        if enabled:
            triggers.enable_trigger(doc["trigger_id"], trigger_token(harness, queue, flow))
        return doc["trigger_id"]

    def test_matching_event_starts_flow_with_rendered_input(self, world):
        harness, intro, queue, flow = world
        trigger_id = self.make_trigger(world)
        harness.platform.queues.send(queue["queue_id"], intro, {"filename": "scan_1.tiff"})
        runs = wait_until(
            lambda: harness.platform.engine.list_runs(intro, flow_id=flow["flow_id"])["runs"],
            timeout=10, message="flow run from trigger")
        done = harness.wait_run(runs[0]["run_id"], timeout=10)
        assert done["status"] == "SUCCEEDED"
        assert done["output"] == {"text": "scan_1.tiff",
                                  "echoed": {"input_string": "scan_1.tiff"}}
        stats = wait_until(
            lambda: (lambda d: d if d["statistics"]["invoked"] == 1 else None)(
                harness.platform.triggers.trigger_doc(trigger_id)),
            timeout=5, message="stats update")
        assert stats["statistics"]["matched"] == 1

    def test_non_matching_event_discarded(self, world):
        harness, intro, queue, flow = world
        trigger_id = self.make_trigger(world)
        harness.platform.queues.send(queue["queue_id"], intro, {"filename": "notes.h5"})
        wait_until(lambda: harness.platform.triggers.trigger_doc(
            trigger_id)["statistics"]["discarded"] == 1, timeout=10, message="discard")
        assert harness.platform.queues.depth(queue["queue_id"]) == {"available": 0, "inflight": 0}
        assert harness.platform.engine.list_runs(intro, flow_id=flow["flow_id"])["runs"] == []

    def test_disabled_trigger_consumes_nothing(self, world):
        harness, intro, queue, flow = world
        trigger_id = self.make_trigger(world, enabled=False)
        harness.platform.queues.send(queue["queue_id"], intro, {"filename": "a.tiff"})
        time.sleep(0.5)
        assert harness.platform.queues.depth(queue["queue_id"])["available"] == 1
        harness.platform.triggers.enable_trigger(
            trigger_id, trigger_token(harness, queue, flow))
        wait_until(lambda: harness.platform.queues.depth(
            queue["queue_id"])["available"] == 0, timeout=10, message="drain after enable")

    def test_disable_mid_stream_leaves_messages(self, world):
        harness, intro, queue, flow = world
        trigger_id = self.make_trigger(world)
        harness.platform.triggers.disable_trigger(trigger_id)
        for i in range(3):
            harness.platform.queues.send(queue["queue_id"], intro, {"filename": f"{i}.tiff"})
        time.sleep(0.5)
        assert harness.platform.queues.depth(queue["queue_id"])["available"] == 3

    def test_adaptive_interval_doubles_when_empty(self, harness, world):
        _, intro, queue, flow = world
        triggers = harness.platform.triggers
        triggers.poll_min, triggers.poll_max = 1.0, 60.0
        doc = triggers.create_trigger(intro, queue_id=queue["queue_id"],
                                      action_url=flow["action_url"], predicate="true")
        trigger_id = doc["trigger_id"]
        with harness.platform.store.tx() as conn:  # pin a known starting interval
            conn.execute("UPDATE triggers SET poll_interval=?, state='enabled', token=?"
                         " WHERE trigger_id=?",
                         (1.0, trigger_token(harness, queue, flow), trigger_id))
        observed = [triggers.poll_cycle(trigger_id) for _ in range(5)]
        assert observed == [2.0, 4.0, 8.0, 16.0, 32.0]

    def test_adaptive_interval_halves_on_messages_with_floor(self, harness, world):
        _, intro, queue, flow = world
        triggers = harness.platform.triggers
        triggers.poll_min, triggers.poll_max = 1.0, 60.0
        doc = triggers.create_trigger(intro, queue_id=queue["queue_id"],
                                      action_url=flow["action_url"], predicate="false")
        trigger_id = doc["trigger_id"]
        with harness.platform.store.tx() as conn:
            conn.execute("UPDATE triggers SET poll_interval=?, state='enabled', token=?"
                         " WHERE trigger_id=?",
                         (8.0, trigger_token(harness, queue, flow), trigger_id))
        intervals = []
        for _ in range(4):
            harness.platform.queues.send(queue["queue_id"], intro, {"x": 1})
            intervals.append(triggers.poll_cycle(trigger_id))
        floor = harness.platform.triggers.poll_min
        assert intervals == [4.0, 2.0, 1.0, max(0.5, floor)][:len(intervals)]

    def test_interval_stays_within_bounds(self, harness, world):
        _, intro, queue, flow = world
        triggers = harness.platform.triggers
        doc = triggers.create_trigger(intro, queue_id=queue["queue_id"],
                                      action_url=flow["action_url"], predicate="true")
        trigger_id = doc["trigger_id"]
        with harness.platform.store.tx() as conn:
            conn.execute("UPDATE triggers SET poll_interval=?, state='enabled', token=?"
                         " WHERE trigger_id=?",
                         (triggers.poll_max, trigger_token(harness, queue, flow), trigger_id))
        assert triggers.poll_cycle(trigger_id) == triggers.poll_max

    def test_message_id_is_request_id_no_double_invoke(self, world):
        """A redelivered message cannot invoke twice (provider dedup)."""
        harness, intro, queue, flow = world
        triggers = harness.platform.triggers
        doc = triggers.create_trigger(intro, queue_id=queue["queue_id"],
                                      action_url=flow["action_url"],
                                      predicate="true", template={"text": "filename"})
        trigger_id = doc["trigger_id"]
        token = trigger_token(world[0], queue, flow)
        message_id = harness.platform.queues.send(queue["queue_id"], intro,
                                                  {"filename": "once.tiff"})
        with harness.platform.store.tx() as conn:
            conn.execute("UPDATE triggers SET state='enabled', token=? WHERE trigger_id=?",
                         (token, trigger_id))
        triggers.poll_cycle(trigger_id)
        # Force the same message back and process it again.
        with harness.platform.store.tx() as conn:
            conn.execute("UPDATE queue_messages SET state='available' WHERE message_id=?",
                         (message_id,))
        triggers.poll_cycle(trigger_id)
        runs = harness.platform.engine.list_runs(intro, flow_id=flow["flow_id"])["runs"]
        assert len(runs) == 1

    def test_auto_disable_after_consecutive_failures(self, world):
        harness, intro, queue, flow = world
        triggers = harness.platform.triggers
        doc = triggers.create_trigger(
            intro, queue_id=queue["queue_id"],
            action_url="http://flowline.test/providers/echo",
            predicate="true", template={"wrong_field": "filename"})
        trigger_id = doc["trigger_id"]
        token = trigger_token(harness, queue, flow)
        with harness.platform.store.tx() as conn:
            conn.execute("UPDATE triggers SET state='enabled', token=? WHERE trigger_id=?",
                         (token, trigger_id))
        budget = triggers.failure_budget
        for i in range(budget + 2):
            harness.platform.queues.send(queue["queue_id"], intro, {"filename": f"f{i}"})
        for _ in range(budget + 2):
            if triggers.poll_cycle(trigger_id) is None:
                break
            with harness.platform.store.tx() as conn:  # make messages visible again
                conn.execute("UPDATE queue_messages SET state='available', invisible_until=0"
                             " WHERE state='inflight'")
        doc = triggers.trigger_doc(trigger_id)
        assert doc["state"] == "disabled"
        assert "consecutive invocation failures" in doc["disabled_reason"]

    def test_recent_results_cached(self, world):
        harness, intro, queue, flow = world
        trigger_id = self.make_trigger(world)
        harness.platform.queues.send(queue["queue_id"], intro, {"filename": "r.tiff"})
        results = wait_until(
            lambda: harness.platform.triggers.trigger_doc(trigger_id)["recent_results"],
            timeout=10, message="cached result")
        assert results[0]["state"] in ("SUCCEEDED", "ACTIVE", "FAILED")
        wait_until(lambda: harness.platform.triggers.trigger_doc(
            trigger_id)["recent_results"][-1]["state"] == "SUCCEEDED",
            timeout=10, message="terminal cached result")
