#!/usr/bin/env python3
"""
test_end_to_end.py - whole scenarios through the network and the metrics

Covers the ten-node trust example, the dropper and Sybil scenarios, the
destination-mobility alert, the honest 50-node baseline and determinism.

Run: python -m pytest tests/test_end_to_end.py
"""

import sys
import unittest
from dataclasses import replace
from pathlib import Path

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from metrics import TraceSink, is_ordered, metrics_equal  # noqa: E402
from model import MessageKind, NodeId, PseudoId, distance  # noqa: E402
from network import Network  # noqa: E402
from scenario import Defenses, load_config, parse_config  # noqa: E402
from simulate import run_scenario  # noqa: E402
from trust import ModeFlag  # noqa: E402
from visualize import chosen_routes, is_connected, unit_disk_graph  # noqa: E402
from vhr import in_region  # noqa: E402

SCENARIOS = project_root / "scenarios"


RANDOM_FIELD = """
[scenario]
name = "random-field"
seed = SEED
duration = 2.0
mode = 2

[field]
width = 1000.0
height = 1000.0

[nodes]
count = 50

[radio]
range = 300.0

[[traffic]]
source = 0
destination = 49
start = 0.1
packets = 5

[[traffic]]
source = 9
destination = 40
start = 0.3
packets = 5

[[traffic]]
source = 20
destination = 29
start = 0.5
packets = 5
"""


def scenario_text(name):
    return (SCENARIOS / f"{name}.toml").read_text(encoding="utf-8")


def values(records, key):
    return [r.get(key) for r in records]


class TestWorkedExample(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = load_config(SCENARIOS / "worked_example.toml")

    def test_trust_strings_on_the_reverse_paths(self):
        result = run_scenario(self.cfg)
        candidates = result.trace.events("route_candidate")
        self.assertEqual(sorted(values(candidates, "trust")), ["544", "87875"])
        averages = {r.get("trust"): float(r.get("avg_trust")) for r in candidates}
        self.assertAlmostEqual(averages["544"], 4.33, delta=0.005)
        self.assertEqual(averages["87875"], 7.0)

    def test_mode_one_takes_the_trusted_path(self):
        result = run_scenario(self.cfg)
        selected = result.trace.events("route_selected")
        self.assertEqual(len(selected), 1)
        self.assertEqual((selected[0].get("trust"), selected[0].get("hops")), ("87875", "6"))
        self.assertEqual(selected[0].get("avg_trust"), "7.000000")
        self.assertEqual(chosen_routes(result.network), {1: [0, 5, 6, 7, 8, 9, 4]})
        self.assertEqual(result.metrics.delivery_ratio, 1.0)

    def test_mode_two_takes_the_short_path(self):
        result = run_scenario(replace(self.cfg, mode=ModeFlag.SHORTEST))
        selected = result.trace.events("route_selected")
        self.assertEqual((selected[0].get("trust"), selected[0].get("hops")), ("544", "4"))
        self.assertEqual(chosen_routes(result.network), {1: [0, 1, 2, 3, 4]})
        self.assertEqual(result.metrics.mean_hops, 4.0)

    def test_security_level_picks_the_mode(self):
        text = scenario_text("worked_example").replace("interval = 0.1", 'interval = 0.1\nsecurity_level = "normal"')
        result = run_scenario(parse_config(text))
        self.assertEqual(result.trace.events("route_selected")[0].get("mode"), "2")

    def test_third_request_dead_ends(self):
        result = run_scenario(self.cfg)
        self.assertEqual(result.metrics.dead_ends, 1)
        self.assertEqual(result.metrics.route_discovery_success, 1.0)

    def test_source_authentication_on_the_way(self):
        text = scenario_text("worked_example").replace("sybil_probe = false", "sybil_probe = false\nauthenticate_source = true")
        result = run_scenario(parse_config(text))
        outcomes = set(values(result.trace.events("source_auth"), "result"))
        self.assertIn("pending", outcomes)
        self.assertIn("granted", outcomes)
        self.assertNotIn("drop", outcomes)
        self.assertEqual(result.metrics.routes_selected, 1)
        self.assertEqual(result.metrics.delivery_ratio, 1.0)
        for node in result.network.nodes.values():
            self.assertEqual(node.authenticator.pending, {})


class TestDeterminism(unittest.TestCase):
    def test_same_seed_same_bytes(self):
        cfg = load_config(SCENARIOS / "dropper.toml")
        a = run_scenario(cfg, seed=3)
        b = run_scenario(cfg, seed=3)
        self.assertEqual(a.trace.text(), b.trace.text())
        self.assertTrue(metrics_equal(a.metrics, b.metrics))

    def test_trace_order_and_accounting(self):
        result = run_scenario(load_config(SCENARIOS / "baseline.toml"))
        records = result.trace.records
        self.assertTrue(is_ordered(records))
        sent = set(values(result.trace.events("data_sent"), "pkt"))
        delivered = values(result.trace.events("data_delivered"), "pkt")
        self.assertEqual(len(delivered), len(set(delivered)))
        self.assertTrue(set(delivered) <= sent)


class TestDropper(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = load_config(SCENARIOS / "dropper.toml")
        cls.off = replace(cls.cfg, defenses=Defenses(watchdog=False, path_selector=False, sybil_probe=False))

    def test_flagged_within_threshold(self):
        result = run_scenario(self.cfg)
        flags = result.trace.events("watchdog_flag")
        self.assertTrue(flags)
        self.assertEqual(set(values(flags, "suspect")), {"2"})
        first = flags[0].time
        drops_before = [r for r in result.trace.events("data_dropped") if r.actor == "2" and r.time < first]
        self.assertLessEqual(len(drops_before), self.cfg.watchdog_threshold)
        self.assertEqual(result.metrics.watchdog_true_positives, 1)
        self.assertEqual(result.metrics.watchdog_false_positives, 0)

    def test_honest_nodes_accrue_nothing(self):
        network = run_scenario(self.cfg).network
        for sid in network.servers:
            server = network.nodes[sid].server
            self.assertTrue(set(server.watchdog.failure_rate) <= {NodeId(2)})

    def test_second_flow_routes_around(self):
        result = run_scenario(self.cfg)
        denied = result.trace.events("winner_denied")
        self.assertIn("2", values(denied, "actual"))
        self.assertEqual(chosen_routes(result.network)[2], [0, 3, 4, 1])

    def test_defenses_off_loses_everything(self):
        result = run_scenario(self.off)
        self.assertEqual(result.metrics.delivery_ratio, 0.0)
        self.assertEqual(result.trace.events("watchdog_flag"), [])

    def test_paired_seeds(self):
        on, off = [], []
        for seed in range(1, 21):
            on.append(run_scenario(self.cfg, seed=seed).metrics.delivery_ratio)
            off.append(run_scenario(self.off, seed=seed).metrics.delivery_ratio)
        for a, b in zip(on, off):
            self.assertGreaterEqual(a, b)
        self.assertGreater(sum(on) / len(on), sum(off) / len(off))


class TestSybil(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.result = run_scenario(load_config(SCENARIOS / "sybil.toml"))

    def test_claim_denied_every_time(self):
        checks = self.result.trace.events("validation")
        of_sybil = [r.get("verdict") for r in checks if r.get("actual") == "4"]
        self.assertTrue(of_sybil)
        self.assertEqual(set(of_sybil), {"sybil"})

    def test_honest_winners_never_denied(self):
        checks = self.result.trace.events("validation")
        honest = [r.get("verdict") for r in checks if r.get("actual") != "4"]
        self.assertTrue(honest)
        self.assertEqual(set(honest), {"legitimate"})
        self.assertEqual(self.result.metrics.sybil_false_positives, 0)
        self.assertEqual(self.result.metrics.sybil_false_denial_rate, 0.0)

    def test_route_avoids_the_sybil(self):
        self.assertEqual(chosen_routes(self.result.network), {1: [0, 2, 3, 1]})
        self.assertEqual(self.result.metrics.delivery_ratio, 1.0)
        self.assertGreaterEqual(self.result.metrics.sybil_true_positives, 1)


class TestDestinationMobility(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.text = scenario_text("mobility")

    def test_alert_leads_to_a_fresh_route(self):
        result = run_scenario(parse_config(self.text))
        trace = result.trace
        self.assertTrue([r for r in trace.events("alert_sent") if r.actor == "3"])
        self.assertTrue([r for r in trace.events("alert_received") if r.actor == "0"])
        self.assertIn("alert", values(trace.events("session_start"), "reason"))
        self.assertEqual(chosen_routes(result.network)[2], [0, 1, 2, 4, 3])
        self.assertEqual(result.metrics.delivery_ratio, 1.0)

    def test_servers_learn_the_new_position(self):
        network = run_scenario(parse_config(self.text)).network
        d = NodeId(3)
        homes = network.home_servers(d)
        self.assertTrue(homes)
        for sid in homes:
            record = network.nodes[sid].server.records.records[d]
            self.assertGreater(record.pos.x, 880.0)

    def test_without_alerts_delivery_fails(self):
        result = run_scenario(parse_config(self.text.replace("alerts = true", "alerts = false")))
        self.assertEqual(result.trace.events("alert_sent"), [])
        self.assertEqual(result.metrics.data_sent, 5)
        self.assertEqual(result.metrics.delivery_ratio, 0.0)

    def test_broken_reverse_path_loses_the_alert(self):
        text = self.text + "\n[[failures]]\nnode = 1\nat = 2.0\n"
        result = run_scenario(parse_config(text))
        self.assertTrue(result.trace.events("alert_sent"))
        self.assertEqual(result.trace.events("alert_received"), [])
        self.assertEqual(result.metrics.delivery_ratio, 0.0)


class TestHonestBaseline(unittest.TestCase):
    def test_topology_is_connected(self):
        cfg = load_config(SCENARIOS / "baseline.toml")
        graph = unit_disk_graph({NodeId(i): p for i, p in enumerate(cfg.placements)}, cfg.radio.r)
        self.assertTrue(is_connected(graph))

    def test_fifty_seeds(self):
        cfg = load_config(SCENARIOS / "baseline.toml")
        sessions = selected = 0
        for seed in range(1, 51):
            result = run_scenario(cfg, seed=seed)
            m = result.metrics
            sessions += m.sessions
            selected += m.routes_selected
            self.assertEqual(m.data_delivered, m.data_sent, f"seed {seed}")
            for node in result.network.nodes.values():
                for session in node.discovery.sessions.values():
                    if session.chosen is not None:
                        path = session.chosen.path
                        self.assertEqual(len(set(path)), len(path), f"seed {seed}")
        self.assertGreaterEqual(selected / sessions, 0.99)

    def test_random_placements(self):
        kept = sessions = selected = 0
        for seed in range(1, 26):
            cfg = parse_config(RANDOM_FIELD.replace("SEED", str(seed)))
            result = run_scenario(cfg)
            network = result.network
            graph = unit_disk_graph(dict(network.kernel.positions), cfg.radio.r)
            if not is_connected(graph) or any(not network.home_servers(f.destination) for f in cfg.traffic):
                continue
            kept += 1
            m = result.metrics
            sessions += m.sessions
            selected += m.routes_selected
            self.assertEqual(m.data_delivered, m.data_sent, f"seed {seed}")
        self.assertGreaterEqual(kept, 10)
        self.assertGreaterEqual(selected / sessions, 0.8)

    def test_random_waypoint_smoke(self):
        text = """
[scenario]
seed = 21
duration = 2.0

[field]
width = 600.0
height = 600.0

[nodes]
count = 20

[radio]
range = 250.0

[mobility]
model = "random_waypoint"
max_speed = 10.0

[[traffic]]
source = 0
destination = 19
start = 0.2
packets = 5
"""
        result = run_scenario(parse_config(text))
        self.assertTrue(is_ordered(result.trace.records))
        kernel = result.network.kernel
        for p in kernel.positions.values():
            self.assertTrue(0 <= p.x <= 600 and 0 <= p.y <= 600)
        self.assertEqual(result.metrics.sessions, len(result.trace.events("session_start")))


class TestRouteState(unittest.TestCase):
    """Routing tables, reverse paths and server records on finished and running networks."""

    def run_checked(self, name):
        cfg = load_config(SCENARIOS / f"{name}.toml")
        network = Network(cfg, TraceSink())
        kernel = network.kernel
        membership = {}

        def belongs(server, node):
            key = (server.position, node)
            if key not in membership:
                membership[key] = in_region(server.position, node, network.vhr)
            return membership[key]

        def check_servers(event):
            for server in network.live_servers():
                for node, record in server.server.records.records.items():
                    self.assertTrue(belongs(server, node), f"{server} holds {node} at t={kernel.now}")
                    error = distance(record.pos, kernel.positions[node])
                    self.assertLessEqual(error, network.vhr.update_threshold, f"t={kernel.now}")

        kernel.after_event.append(check_servers)
        network.run()
        return network

    def check_tables(self, network):
        successors = {}
        for node in network.nodes.values():
            for req, entry in node.discovery.routes.items():
                for hop in (entry.prev_hop_pseudo, entry.next_hop_pseudo):
                    self.assertTrue(hop is None or isinstance(hop, PseudoId), f"node {node.id} req {req}")
                if entry.prev_hop_pseudo is not None:
                    successors.setdefault((req, entry.prev_hop_pseudo), []).append(node)
        for node in network.nodes.values():
            for req, entry in node.discovery.routes.items():
                if entry.next_hop_pseudo is None:
                    continue
                own = node.discovery.pseudonyms[req]
                after = successors.get((req, own), [])
                self.assertEqual(len(after), 1, f"node {node.id} req {req}")
                self.assertEqual(after[0].discovery.pseudonyms[req], entry.next_hop_pseudo)

    def check_progress(self, network):
        rounds = network.kernel.trace.events("rreq")
        per_request = {}
        for r in rounds:
            per_request.setdefault(int(r.get("req")), {})[int(r.get("hop"))] = float(r.get("l"))
        self.assertTrue(per_request)
        for req, by_hop in per_request.items():
            ls = [by_hop[h] for h in sorted(by_hop)]
            self.assertEqual(ls, sorted(ls, reverse=True), f"req {req}")

    def check_server_sets(self, network):
        for server in network.live_servers():
            expected = {n for n in network.nodes if in_region(server.position, n, network.vhr)}
            self.assertEqual(set(server.server.records.records), expected, f"{server}")

    def test_worked_example(self):
        network = self.run_checked("worked_example")
        self.check_tables(network)
        self.check_progress(network)
        self.check_server_sets(network)

    def test_baseline(self):
        network = self.run_checked("baseline")
        self.check_tables(network)
        self.check_progress(network)
        self.check_server_sets(network)

    def test_round_state_released(self):
        network = run_scenario(load_config(SCENARIOS / "baseline.toml")).network
        self.assertEqual(network.rounds, {})
        for node in network.nodes.values():
            discovery = node.discovery
            self.assertEqual(discovery.offers, {}, f"node {node.id}")
            self.assertTrue(set(discovery.pseudonyms) <= set(discovery.routes), f"node {node.id}")
            if node.server is not None:
                self.assertEqual(node.server.prober.probes, {})
                self.assertEqual(node.server.probe_requests, {})


class TestLostAck(unittest.TestCase):
    def test_predecessor_retry_is_acked_again(self):
        network = Network(load_config(SCENARIOS / "worked_example.toml"), TraceSink())
        kernel = network.kernel
        deliver = kernel.unicast
        dropped = []

        def lossy(sender, dest, msg):
            if msg.kind is MessageKind.ACK and not dropped:
                dropped.append((sender, dest, msg.payload.request_id))
                return False
            return deliver(sender, dest, msg)

        kernel.unicast = lossy
        network.run()
        self.assertEqual(len(dropped), 1)
        relay, sender, req = dropped[0]
        resent = [r for r in kernel.trace.events("ack_resent") if r.actor == str(relay)]
        self.assertTrue(resent)
        self.assertEqual({r.get("req") for r in resent}, {str(req)})
        upstream = network.nodes[sender].discovery
        own = upstream.pseudonyms[req]
        self.assertEqual(upstream.routes[req].next_hop_pseudo, network.nodes[relay].discovery.pseudonyms[req])
        extending = [
            n.id
            for n in network.nodes.values()
            if req in n.discovery.routes and n.discovery.routes[req].prev_hop_pseudo == own
        ]
        self.assertEqual(extending, [relay])
        established = [(r.actor, r.get("req")) for r in kernel.trace.events("hop_established")]
        self.assertEqual(len(established), len(set(established)))


if __name__ == "__main__":
    unittest.main()
