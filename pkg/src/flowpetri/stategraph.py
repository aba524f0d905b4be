"""Explicit state graphs shared by FM exploration and PN reachability."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Edge:
    src: int
    label: str
    dst: int
    # Subject-id lists of the micro-steps this edge performs, in order.
    # Event extraction matches anchors against them.
    step_subjects: tuple[tuple[str, ...], ...] = ()


@dataclass
class StateGraph:
    nodes: list[object] = field(default_factory=list)  # canonical states, discovery order
    edges: list[Edge] = field(default_factory=list)
    initial: int = 0
    truncated: bool = False

    def successors(self, idx: int) -> list[Edge]:
        return [e for e in self.edges if e.src == idx]

    def node_count(self) -> int:
        return len(self.nodes)

    def reaches_all_back_to(self, target: int) -> bool:
        """True when every node can reach `target` along edges."""
        reverse: dict[int, list[int]] = {}
        for e in self.edges:
            reverse.setdefault(e.dst, []).append(e.src)
        seen = {target}
        frontier = [target]
        while frontier:
            node = frontier.pop()
            for prev in reverse.get(node, []):
                if prev not in seen:
                    seen.add(prev)
                    frontier.append(prev)
        return len(seen) == len(self.nodes)
