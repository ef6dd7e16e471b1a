#!/usr/bin/env python3
"""
visualize.py
-------------
Unit-disk topology of a scenario as a NetworkX graph, the reachability oracle
the end-to-end checks rely on, and a Graphviz export that pins every node at
its field position and highlights the routes the sources selected.

Usage:
  python visualize.py --config scenarios/worked_example.toml --out topology.dot
  python visualize.py --config scenarios/dropper.toml --routes --format svg --out dropper.svg

With Poetry:
  poetry run manet-topology --config scenarios/baseline.toml --format svg --out baseline.svg
"""

import argparse
import subprocess
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import networkx as nx

from metrics import TraceSink
from model import NodeId, Position, distance
from network import Network
from scenario import ConfigError, ScenarioConfig, load_config

ROUTE_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def unit_disk_graph(positions: Mapping[NodeId, Position], r: float) -> nx.Graph:
    """Nodes linked iff they are within ``r`` of each other (boundary included)."""
    G = nx.Graph()
    for nid, pos in positions.items():
        G.add_node(nid, x=pos.x, y=pos.y)
    ids = sorted(positions)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            d = distance(positions[a], positions[b])
            if d <= r:
                G.add_edge(a, b, weight=d)
    return G


def network_graph(network: Network) -> nx.Graph:
    kernel = network.kernel
    live = {n: kernel.positions[n] for n in kernel.live_nodes()}
    return unit_disk_graph(live, kernel.radio.r)


def is_connected(G: nx.Graph) -> bool:
    return G.number_of_nodes() > 0 and nx.is_connected(G)


def reachable(G: nx.Graph, a: NodeId, b: NodeId) -> bool:
    return a in G and b in G and nx.has_path(G, a, b)


def topology_metrics(G: nx.Graph) -> Dict[str, object]:
    metrics: Dict[str, object] = {
        "nodes": G.number_of_nodes(),
        "edges": G.number_of_edges(),
        "components": nx.number_connected_components(G) if G.number_of_nodes() else 0,
    }
    if is_connected(G):
        metrics["diameter_hops"] = nx.diameter(G)
    return metrics


def route_nodes(network: Network, source: NodeId, request_id: int) -> List[NodeId]:
    """Real node sequence of one request, walked through routing tables and link bindings."""
    path = [source]
    node = source
    while True:
        discovery = network.nodes[node].discovery
        entry = discovery.routes.get(request_id)
        if entry is None or entry.next_hop_pseudo is None:
            return path
        nxt = discovery.links.get(entry.next_hop_pseudo)
        if nxt is None or nxt in path:
            return path
        path.append(nxt)
        node = nxt


def chosen_routes(network: Network) -> Dict[int, List[NodeId]]:
    """Session id -> node sequence of the route its source selected."""
    routes: Dict[int, List[NodeId]] = {}
    for nid, node in network.nodes.items():
        for session in node.discovery.sessions.values():
            if session.chosen is not None:
                routes[session.session_id] = route_nodes(network, nid, session.chosen.request_id)
    return dict(sorted(routes.items()))


def _route_edges(routes: Iterable[Sequence[NodeId]]) -> Dict[frozenset, str]:
    colored: Dict[frozenset, str] = {}
    for i, path in enumerate(routes):
        for a, b in zip(path, path[1:]):
            colored.setdefault(frozenset((a, b)), ROUTE_COLORS[i % len(ROUTE_COLORS)])
    return colored


def to_dot(
    G: nx.Graph,
    servers: Iterable[NodeId] = (),
    adversaries: Iterable[NodeId] = (),
    routes: Optional[Iterable[Sequence[NodeId]]] = None,
    scale: float = 0.01,
) -> str:
    """Undirected DOT with ``pos`` pinned in inches (render with neato -n)."""
    servers = set(servers)
    adversaries = set(adversaries)
    colored = _route_edges(routes or [])
    lines = [
        "graph G {",
        "  node [shape=circle, fontsize=10, width=0.3, fixedsize=true];",
        "  edge [color=\"#bbbbbb\"];",
    ]
    for nid, data in sorted(G.nodes(data=True)):
        attrs = [f'pos="{data["x"] * scale * 72:.1f},{data["y"] * scale * 72:.1f}!"']
        if nid in servers:
            attrs.append("shape=doublecircle")
        if nid in adversaries:
            attrs.append('style=filled, fillcolor="#f4a6a6"')
        lines.append(f"  {nid} [{', '.join(attrs)}];")
    for a, b in sorted(G.edges()):
        color = colored.get(frozenset((a, b)))
        extra = f' [color="{color}", penwidth=2.5]' if color else ""
        lines.append(f"  {a} -- {b}{extra};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_dot(text: str, out_path: Path) -> None:
    out_path.write_text(text, encoding="utf-8")


def dot_to_svg(dot_path: Path, svg_path: Path) -> bool:
    try:
        cmd = ["neato", "-n", "-Tsvg", str(dot_path), "-o", str(svg_path)]
        res = subprocess.run(cmd, capture_output=True, text=True)
        return res.returncode == 0
    except FileNotFoundError:
        return False


def scenario_dot(cfg: ScenarioConfig, with_routes: bool) -> str:
    """DOT for ``cfg``: initial topology, or the topology at the end of a run with its routes."""
    network = Network(cfg, TraceSink())
    routes = None
    if with_routes:
        network.run()
        routes = list(chosen_routes(network).values())
    return to_dot(
        network_graph(network),
        servers=network.servers,
        adversaries=[p.node for p in cfg.adversaries],
        routes=routes,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="manet-topology")
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", dest="out_path", default="topology.dot")
    ap.add_argument("--format", choices=["dot", "svg"], default="dot")
    ap.add_argument("--routes", action="store_true", help="run the scenario and highlight selected routes")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    text = scenario_dot(cfg, args.routes)

    out = Path(args.out_path)
    if args.format == "dot":
        write_dot(text, out)
        print(f"Wrote DOT to {out}")
        return 0

    dot_path = out.with_suffix(".dot")
    write_dot(text, dot_path)
    if dot_to_svg(dot_path, out):
        print(f"Wrote SVG to {out}")
    else:
        print("Graphviz 'neato' not found or failed. DOT was written to:", dot_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
