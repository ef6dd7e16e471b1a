#!/usr/bin/env python3
"""
test_defense.py - droppers, watchdog, path selector and Sybil probes

Run: python -m pytest tests/test_defense.py
"""

import sys
import unittest
from pathlib import Path
from unittest import mock

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

import defense  # noqa: E402
from defense import (  # noqa: E402
    AdversaryKind,
    AdversaryProfile,
    ForwardDecision,
    PathSelector,
    SelectorDecision,
    SybilProbeReply,
    SybilProber,
    SybilVerdict,
    Watchdog,
    adversary_forward_decision,
    pathselector_check,
    should_answer_probe,
)
from kernel import make_rng  # noqa: E402
from model import NodeId, Position  # noqa: E402


class TestAdversaries(unittest.TestCase):
    def test_half_dropper_is_binomial(self):
        rng = make_rng(17)
        profile = AdversaryProfile(NodeId(3), AdversaryKind.DROPPER, drop_probability=0.5)
        drops = sum(adversary_forward_decision(profile, rng) is ForwardDecision.DROP for _ in range(1000))
        self.assertTrue(435 <= drops <= 565, drops)

    def test_degenerate_profiles(self):
        rng = make_rng(1)
        always = AdversaryProfile(NodeId(1), AdversaryKind.DROPPER, drop_probability=1.0)
        never = AdversaryProfile(NodeId(1), AdversaryKind.DROPPER, drop_probability=0.0)
        sybil = AdversaryProfile(NodeId(2), AdversaryKind.SYBIL, claimed_pos=Position(1, 1))
        for _ in range(100):
            self.assertIs(adversary_forward_decision(always, rng), ForwardDecision.DROP)
            self.assertIs(adversary_forward_decision(never, rng), ForwardDecision.FORWARD)
            self.assertIs(adversary_forward_decision(sybil, rng), ForwardDecision.FORWARD)
            self.assertIs(adversary_forward_decision(None, rng), ForwardDecision.FORWARD)

    def test_profile_validation(self):
        with self.assertRaises(ValueError):
            AdversaryProfile(NodeId(1), AdversaryKind.DROPPER, drop_probability=1.5)
        with self.assertRaises(ValueError):
            AdversaryProfile(NodeId(1), AdversaryKind.SYBIL)


class TestWatchdog(unittest.TestCase):
    def test_forwarded_packet_clears(self):
        dog = Watchdog(timeout=50, threshold=3)
        deadline = dog.observe_receive(NodeId(4), 1, 100)
        self.assertEqual(deadline, 150)
        self.assertTrue(dog.observe_transmit(NodeId(4), 1))
        self.assertFalse(dog.expire(NodeId(4), 1, 150))
        self.assertEqual(dog.failure_rate.get(NodeId(4), 0), 0)

    def test_unmatched_transmit(self):
        self.assertFalse(Watchdog().observe_transmit(NodeId(4), 9))

    def test_expire_before_deadline_is_noop(self):
        dog = Watchdog(timeout=50)
        dog.observe_receive(NodeId(4), 1, 0)
        self.assertFalse(dog.expire(NodeId(4), 1, 49))
        self.assertTrue(dog.expire(NodeId(4), 1, 50))

    def test_flagged_at_threshold(self):
        dog = Watchdog(timeout=50, threshold=3)
        for pkt in range(1, 4):
            self.assertFalse(dog.is_misbehaving(NodeId(4)))
            dog.observe_receive(NodeId(4), pkt, pkt * 100)
            dog.expire(NodeId(4), pkt, pkt * 100 + 50)
        self.assertTrue(dog.is_misbehaving(NodeId(4)))
        self.assertEqual(dog.failure_rate[NodeId(4)], 3)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            Watchdog(timeout=0)
        with self.assertRaises(ValueError):
            Watchdog(threshold=0)


class TestPathSelector(unittest.TestCase):
    def test_decisions(self):
        dog = Watchdog(timeout=10, threshold=2)
        self.assertIs(pathselector_check([dog], NodeId(5)), SelectorDecision.ALLOW)
        self.assertIs(pathselector_check([dog], None), SelectorDecision.ALLOW)
        dog.observe_receive(NodeId(5), 1, 0)
        dog.expire(NodeId(5), 1, 10)
        self.assertIs(pathselector_check([dog], NodeId(5)), SelectorDecision.ALLOW)
        dog.observe_receive(NodeId(5), 2, 20)
        dog.expire(NodeId(5), 2, 30)
        self.assertIs(pathselector_check([dog], NodeId(5)), SelectorDecision.DENY)
        self.assertIs(pathselector_check([Watchdog(), dog], NodeId(5)), SelectorDecision.DENY)
        self.assertIs(pathselector_check([], NodeId(5)), SelectorDecision.ALLOW)

    def test_clean_forwarder_counts_as_observed(self):
        dog = Watchdog(timeout=10, threshold=2)
        dog.observe_receive(NodeId(5), 1, 0)
        dog.observe_transmit(NodeId(5), 1)
        self.assertTrue(dog.has_observed(NodeId(5)))
        self.assertFalse(dog.has_observed(NodeId(6)))
        with mock.patch.object(defense.logger, "info") as info:
            self.assertIs(pathselector_check([dog], NodeId(5)), SelectorDecision.ALLOW)
            info.assert_not_called()
            self.assertIs(pathselector_check([dog], NodeId(6)), SelectorDecision.ALLOW)
            info.assert_called_once()

    def test_rating_is_the_failure_count(self):
        a, b = Watchdog(timeout=10), Watchdog(timeout=10)
        a.failure_rate[NodeId(1)] = 1
        b.failure_rate[NodeId(1)] = 2
        self.assertEqual(PathSelector([a, b]).rating(NodeId(1)), 2)
        self.assertEqual(PathSelector([]).rating(NodeId(1)), 0)


class TestSybilProbe(unittest.TestCase):
    def test_answered_probe_is_legitimate(self):
        prober = SybilProber(timeout=100, tolerance=10.0)
        probe = prober.start(Position(50, 50), 0)
        self.assertEqual(probe.deadline, 100)
        self.assertIs(prober.on_reply(SybilProbeReply(probe.probe_id, Position(52, 50)), 40), SybilVerdict.LEGITIMATE)
        self.assertIsNone(prober.on_reply(SybilProbeReply(probe.probe_id, Position(52, 50)), 41))
        self.assertIsNone(prober.on_timeout(probe.probe_id))
        self.assertEqual(prober.probes, {})

    def test_silence_is_sybil(self):
        prober = SybilProber(timeout=100)
        probe = prober.start(Position(50, 50), 0)
        self.assertIsNone(prober.on_reply(SybilProbeReply(probe.probe_id, Position(50, 50)), 101))
        self.assertIs(prober.on_timeout(probe.probe_id), SybilVerdict.SYBIL)
        self.assertIsNone(prober.on_timeout(probe.probe_id))
        self.assertEqual(prober.probes, {})

    def test_probe_ids_unique(self):
        prober = SybilProber()
        ids = {prober.start(Position(1, 1), 0).probe_id for _ in range(50)}
        self.assertEqual(len(ids), 50)

    def test_answer_within_tolerance(self):
        prober = SybilProber(tolerance=10.0)
        probe = prober.start(Position(100, 100), 0)
        self.assertTrue(should_answer_probe(Position(106, 108), probe, 10.0))
        self.assertFalse(should_answer_probe(Position(111, 100), probe, 10.0))


if __name__ == "__main__":
    unittest.main()
