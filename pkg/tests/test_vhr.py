#!/usr/bin/env python3
"""
test_vhr.py - home regions, position records and the client bookkeeping

Run: python -m pytest tests/test_vhr.py
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from kernel import make_rng  # noqa: E402
from model import NodeId, Position  # noqa: E402
from vhr import (  # noqa: E402
    MobilityAlert,
    PositionClient,
    PosReply,
    PosUpdate,
    ServerState,
    VhrConfig,
    candidate_servers,
    handle_mobility_notice,
    handle_pos_request,
    in_region,
    vhr_center,
)


def chi_square_p(stat, dof):
    """Upper-tail p-value, Wilson-Hilferty approximation."""
    z = ((stat / dof) ** (1 / 3) - (1 - 2 / (9 * dof))) / math.sqrt(2 / (9 * dof))
    return 0.5 * math.erfc(z / math.sqrt(2))

class TestHomeRegion(unittest.TestCase):
    def test_center_is_stable_and_inside(self):
        for n in range(200):
            c = vhr_center(NodeId(n), 1000.0, 800.0)
            self.assertEqual(c, vhr_center(NodeId(n), 1000.0, 800.0))
            self.assertTrue(0 <= c.x < 1000.0 and 0 <= c.y < 800.0)

    def test_centers_spread_out(self):
        centers = {vhr_center(NodeId(n), 1000.0, 1000.0) for n in range(100)}
        self.assertEqual(len(centers), 100)

    def test_centers_uniform_over_the_field(self):
        centers = [vhr_center(NodeId(n), 1000.0, 1000.0) for n in range(10_000)]
        xs = np.array([c.x for c in centers])
        ys = np.array([c.y for c in centers])
        counts, _, _ = np.histogram2d(xs, ys, bins=10, range=[[0.0, 1000.0], [0.0, 1000.0]])
        expected = len(centers) / counts.size
        stat = float(((counts - expected) ** 2 / expected).sum())
        self.assertGreater(chi_square_p(stat, counts.size - 1), 0.01)

    def test_region_membership(self):
        cfg = VhrConfig(1000.0, 1000.0, 100.0)
        center = vhr_center(NodeId(7), 1000.0, 1000.0)
        self.assertTrue(in_region(center, NodeId(7), cfg))
        self.assertTrue(in_region(Position(center.x + 99.9, center.y), NodeId(7), cfg))
        self.assertFalse(in_region(Position(center.x + 100.5, center.y), NodeId(7), cfg))

    def test_config_bounds(self):
        with self.assertRaises(ValueError):
            VhrConfig(1000.0, 600.0, 300.0)
        with self.assertRaises(ValueError):
            VhrConfig(1000.0, 1000.0, 100.0, update_threshold=0.0)


class TestServer(unittest.TestCase):
    def setUp(self):
        self.cfg = VhrConfig(1000.0, 1000.0, 100.0)
        self.server = ServerState(NodeId(9))

    def test_lookup_found_and_missing(self):
        self.server.store(PosUpdate(NodeId(3), Position(10, 20), 500, 77))
        reply = handle_pos_request(self.server, NodeId(1), NodeId(3))
        self.assertEqual(reply, PosReply(NodeId(3), True, Position(10, 20), 500, 77))
        self.assertFalse(handle_pos_request(self.server, NodeId(1), NodeId(4)).found)

    def test_update_replaces_record(self):
        self.server.store(PosUpdate(NodeId(3), Position(10, 20), 500, 77))
        self.server.store(PosUpdate(NodeId(3), Position(90, 20), 900, 78))
        record = self.server.records[NodeId(3)]
        self.assertEqual((record.pos, record.auth_code), (Position(90, 20), 78))

    def test_mobility_notice_keeps_code(self):
        self.server.store(PosUpdate(NodeId(3), Position(10, 20), 500, 77))
        handle_mobility_notice(self.server, MobilityAlert(Position(70, 20), 800, None, NodeId(3)))
        record = self.server.records[NodeId(3)]
        self.assertEqual((record.pos, record.update_time, record.auth_code), (Position(70, 20), 800, 77))
        handle_mobility_notice(self.server, MobilityAlert(Position(0, 0), 100, None, NodeId(3)))
        self.assertEqual(self.server.records[NodeId(3)].pos, Position(70, 20))

    def test_mobility_notice_for_unknown_node(self):
        handle_mobility_notice(self.server, MobilityAlert(Position(5, 5), 100, None, NodeId(4)))
        self.assertEqual(self.server.records[NodeId(4)].auth_code, 0)
        with self.assertRaises(ValueError):
            handle_mobility_notice(self.server, MobilityAlert(Position(5, 5), 100, 12))

    def test_prune_drops_foreign_records(self):
        here = vhr_center(NodeId(0), 1000.0, 1000.0)
        foreign = next(n for n in range(1, 500) if not in_region(here, NodeId(n), self.cfg))
        self.server.store(PosUpdate(NodeId(0), here, 0, 1))
        self.server.store(PosUpdate(NodeId(foreign), here, 0, 2))
        self.assertEqual(self.server.prune(here, self.cfg), [foreign])
        self.assertIn(NodeId(0), self.server.records)

    def test_candidate_servers_nearest_first(self):
        target = NodeId(5)
        c = vhr_center(target, 1000.0, 1000.0)
        servers = [
            (NodeId(2), c),
            (NodeId(1), c),
            (NodeId(4), Position(c.x + 5.0, c.y)),
            (NodeId(3), Position(c.x + 300.0, c.y)),
        ]
        self.assertEqual(candidate_servers(target, c, servers, self.cfg), [1, 2, 4])


class TestPositionClient(unittest.TestCase):
    def test_threshold_and_history(self):
        cfg = VhrConfig(1000.0, 1000.0, 100.0, update_threshold=50.0)
        client = PositionClient(NodeId(1), cfg)
        rng = make_rng(4)
        first = client.maybe_update_position(Position(100, 100), 0, rng)
        self.assertIsNotNone(first)
        self.assertIsNone(client.maybe_update_position(Position(130, 100), 10, rng))
        self.assertIsNone(client.maybe_update_position(Position(150, 100), 20, rng))
        second = client.maybe_update_position(Position(151, 100), 30, rng)
        self.assertIsNotNone(second)
        self.assertNotEqual(first.auth_code, second.auth_code)
        self.assertEqual(client.code_for(Position(100, 100)), first.auth_code)
        self.assertEqual(client.code_for(Position(151, 100)), second.auth_code)
        self.assertIsNone(client.code_for(Position(130, 100)))
        client.remember_alert_position(Position(200, 100), second.auth_code)
        self.assertEqual(client.code_for(Position(200, 100)), second.auth_code)

    def test_auth_codes_never_repeat(self):
        client = PositionClient(NodeId(1), VhrConfig(1000.0, 1000.0, 100.0, update_threshold=50.0))
        rng = make_rng(9)
        codes = []
        for i in range(1000):
            update = client.maybe_update_position(Position(60.0 * i, 0.0), i, rng)
            self.assertIsNotNone(update)
            codes.append(update.auth_code)
        self.assertEqual(len(set(codes)), 1000)
        self.assertEqual(len(client.history), 1000)

    def test_update_codec(self):
        update = PosUpdate(NodeId(3), Position(1.5, 2.5), 42, 99)
        self.assertEqual(PosUpdate.from_bytes(update.to_bytes()), update)
        reply = PosReply(NodeId(3), False)
        self.assertEqual(PosReply.from_bytes(reply.to_bytes()), reply)


if __name__ == "__main__":
    unittest.main()
