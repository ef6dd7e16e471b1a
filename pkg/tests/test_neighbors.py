#!/usr/bin/env python3
"""
test_neighbors.py - beacon position checks and the timed M1/M2 handshake

Run: python -m pytest tests/test_neighbors.py
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from kernel import SPEED_OF_LIGHT, RadioModel  # noqa: E402
from model import MICROS_PER_SECOND, KeyAuthority, NodeId, Position, make_key_token  # noqa: E402
from neighbors import (  # noqa: E402
    Beacon,
    HelloM1,
    NeighborTable,
    ReplyM2,
    Verdict,
    VerifyConfig,
    answer_hello,
    distance_bound,
)

SECOND = MICROS_PER_SECOND


class TestBeaconChecks(unittest.TestCase):
    def setUp(self):
        self.table = NeighborTable(NodeId(0), VerifyConfig(range_threshold=300.0, max_speed=20.0))
        self.here = Position(500, 500)

    def test_beyond_range_always_rejected(self):
        rng = np.random.default_rng(5)
        for i in range(1000):
            angle = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(300.001, 700.0)
            pos = Position(500 + dist * math.cos(angle), 500 + dist * math.sin(angle))
            beacon = Beacon(NodeId(1 + i % 7), pos, i)
            self.assertIs(self.table.process_beacon(self.here, beacon, i * SECOND), Verdict.REJECT)
        self.assertEqual(len(self.table), 0)

    def test_range_rejection_penalizes_known_neighbor(self):
        self.table.process_beacon(self.here, Beacon(NodeId(1), Position(600, 500), 1), 0)
        self.assertIs(
            self.table.verify_beacon_range(self.here, Beacon(NodeId(1), Position(900, 500), 2), SECOND),
            Verdict.REJECT,
        )
        self.assertEqual(self.table.get(NodeId(1)).trust_value, 4)

    def test_teleport_rejected(self):
        rng = np.random.default_rng(6)
        for i in range(1000):
            table = NeighborTable(NodeId(0), VerifyConfig(max_speed=20.0))
            start = Position(500, 500)
            table.process_beacon(self.here, Beacon(NodeId(1), start, 1), 0)
            elapsed = int(rng.integers(1, 5)) * SECOND
            jump = 2 * 20.0 * elapsed / SECOND
            angle = rng.uniform(0, 2 * math.pi)
            moved = Position(500 + jump * math.cos(angle), 500 + jump * math.sin(angle))
            self.assertIs(table.verify_beacon_mobility(Beacon(NodeId(1), moved, 2), elapsed), Verdict.REJECT)
            self.assertEqual(table.get(NodeId(1)).position, start)

    def test_honest_beacons_never_rejected(self):
        rng = np.random.default_rng(7)
        angle = 0.0
        now = 0
        for i in range(10_000):
            angle += rng.uniform(0.0, 0.19)
            pos = Position(500 + 100 * math.cos(angle), 500 + 100 * math.sin(angle))
            self.assertIs(self.table.process_beacon(self.here, Beacon(NodeId(1), pos, i), now), Verdict.ACCEPT)
            now += SECOND
        entry = self.table.get(NodeId(1))
        self.assertEqual(entry.trust_value, 5)
        self.assertEqual(entry.tusn, 9999)

    def test_same_instant_move_rejected(self):
        self.table.process_beacon(self.here, Beacon(NodeId(1), Position(600, 500), 1), 10)
        self.assertIs(self.table.verify_beacon_mobility(Beacon(NodeId(1), Position(601, 500), 2), 10), Verdict.REJECT)

    def test_trust_floor_and_ignore(self):
        self.table.process_beacon(self.here, Beacon(NodeId(1), Position(600, 500), 1), 0)
        for _ in range(7):
            self.table.penalize(NodeId(1))
        self.assertEqual(self.table.get(NodeId(1)).trust_value, 0)
        self.assertTrue(self.table.is_ignored(NodeId(1)))
        self.assertIn(NodeId(1), self.table)

    def test_touch_bumps_tusn(self):
        self.table.process_beacon(self.here, Beacon(NodeId(1), Position(600, 500), 4), 0)
        self.table.touch(NodeId(1), 50, Position(610, 500))
        entry = self.table.get(NodeId(1))
        self.assertEqual((entry.tusn, entry.last_beacon_time, entry.position), (5, 50, Position(610, 500)))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            VerifyConfig(trust_penalty=0)
        with self.assertRaises(ValueError):
            VerifyConfig(initial_trust=12)


class TestDistanceBound(unittest.TestCase):
    def test_hand_arithmetic(self):
        self.assertEqual(distance_bound(0, 2, SPEED_OF_LIGHT), 300.0)
        # a relay adding 2 µs on a 300 m link
        self.assertEqual(distance_bound(0, 4, SPEED_OF_LIGHT), 600.0)
        self.assertEqual(distance_bound(0, 2, SPEED_OF_LIGHT, slack=2), 600.0)
        self.assertEqual(distance_bound(5, 3, SPEED_OF_LIGHT), 0.0)

    def test_honest_round_trip_within_one_quantum(self):
        radio = RadioModel(300.0)
        quantum = SPEED_OF_LIGHT / MICROS_PER_SECOND
        for d in np.linspace(0.0, 300.0, 601):
            rtt = 2 * radio.delay_us(float(d))
            bound = distance_bound(0, rtt, SPEED_OF_LIGHT)
            self.assertLessEqual(d, bound)
            self.assertLess(bound - d, quantum + 1e-9)


class TestHandshake(unittest.TestCase):
    def setUp(self):
        self.salt = b"handshake"
        self.authority = KeyAuthority(self.salt)
        self.me = make_key_token(NodeId(0), self.salt)
        self.peer = make_key_token(NodeId(1), self.salt)
        self.peer_cert = self.authority.certify(self.peer)
        self.table = NeighborTable(NodeId(0), VerifyConfig())

    def reply(self, nonce, pos, cert=None):
        return ReplyM2(NodeId(1), pos, self.peer.public_part, cert or self.peer_cert, nonce)

    def test_in_range_claim_accepted(self):
        nonce = self.table.start_handshake(0)
        result = self.table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(250, 0)), 2, SPEED_OF_LIGHT
        )
        self.assertTrue(result.accepted)
        self.assertEqual(result.outcome, "accepted")
        self.assertEqual(self.table.get(NodeId(1)).public_key, self.peer.public_part)

    def test_claim_beyond_bound_is_wormhole(self):
        nonce = self.table.start_handshake(0)
        result = self.table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(350, 0)), 2, SPEED_OF_LIGHT
        )
        self.assertFalse(result.accepted)
        self.assertEqual((result.outcome, result.bound, result.claimed), ("suspected_wormhole", 300.0, 350.0))
        self.assertNotIn(NodeId(1), self.table)

    def test_relay_delay_inflates_bound(self):
        wide = NeighborTable(NodeId(0), VerifyConfig(range_threshold=1000.0))
        nonce = wide.start_handshake(0)
        ok = wide.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(550, 0)), 4, SPEED_OF_LIGHT
        )
        self.assertTrue(ok.accepted)
        nonce = wide.start_handshake(10)
        too_far = wide.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(650, 0)), 14, SPEED_OF_LIGHT
        )
        self.assertEqual(too_far.outcome, "suspected_wormhole")

    def test_processing_delay_is_slack(self):
        table = NeighborTable(NodeId(0), VerifyConfig(range_threshold=1000.0, processing_delay=2))
        nonce = table.start_handshake(0)
        result = table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(550, 0)), 2, SPEED_OF_LIGHT
        )
        self.assertTrue(result.accepted)

    def test_claim_beyond_range_threshold_not_stored(self):
        table = NeighborTable(NodeId(0), VerifyConfig(range_threshold=200.0, processing_delay=2))
        nonce = table.start_handshake(0)
        result = table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(250, 0)), 2, SPEED_OF_LIGHT
        )
        self.assertEqual((result.outcome, result.claimed), ("out_of_range", 250.0))
        self.assertNotIn(NodeId(1), table)
        nonce = table.start_handshake(4)
        inside = table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(150, 0)), 6, SPEED_OF_LIGHT
        )
        self.assertTrue(inside.accepted)
        self.assertTrue(all(table.within_range(Position(0, 0), e.position) for e in table))

    def test_bad_certificate_and_unknown_nonce(self):
        other = self.authority.certify(make_key_token(NodeId(2), self.salt))
        nonce = self.table.start_handshake(0)
        bad = self.table.complete_handshake(
            self.authority, Position(0, 0), self.reply(nonce, Position(10, 0), other), 2, SPEED_OF_LIGHT
        )
        self.assertEqual(bad.outcome, "bad_certificate")
        stale = self.table.complete_handshake(
            self.authority, Position(0, 0), self.reply(999, Position(10, 0)), 2, SPEED_OF_LIGHT
        )
        self.assertEqual(stale.outcome, "unknown_nonce")

    def test_answer_hello_checks_certificate(self):
        my_cert = self.authority.certify(self.me)
        good = HelloM1(NodeId(1), self.peer_cert, 3)
        reply = answer_hello(self.authority, self.me, my_cert, Position(5, 5), good)
        self.assertEqual((reply.responder, reply.nonce, reply.position), (0, 3, Position(5, 5)))
        forged = HelloM1(NodeId(2), self.peer_cert, 3)
        self.assertIsNone(answer_hello(self.authority, self.me, my_cert, Position(5, 5), forged))
        foreign = KeyAuthority(b"elsewhere").certify(self.peer)
        self.assertIsNone(answer_hello(self.authority, self.me, my_cert, Position(5, 5), HelloM1(NodeId(1), foreign, 3)))


if __name__ == "__main__":
    unittest.main()
