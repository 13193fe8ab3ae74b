"""
Desk-scale resettable environments.

Two tasks with exact snapshot/restore, which is what vine sampling needs:

- RoomsEnv: a multi-room gridworld with keys/balls/boxes/goals and
  goto / pickup missions (optionally two-stage "pickup X then goto Y").
  Dynamics are fully deterministic; reward on success at step t is
  1 - penalty * t / H (penalty 0.5 by default, 0.9 for the ablation).
- TriangleEnv: emit three node tokens conditioned on a graph id; +1 when
  the tokens form a triangle of the (unobserved) graph.

Configurations are JSON documents:

    {"layout": ["########", "#..#...#", ...],
     "objects": [["ball", "red", [5, 2]]],
     "mission": "goto red ball", "horizon": 100,
     "start": [1, 1], "direction": 0}

Graph documents: {"graph_id": 0, "n_nodes": 30, "edges": [[0, 4], ...],
"pretrain_seen": [[0, 4, 9], ...]}.
"""

import hashlib
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from config import ConfigError

ACTIONS = ("left", "right", "forward", "pickup", "drop", "toggle", "done")
LEFT, RIGHT, FORWARD, PICKUP, DROP, TOGGLE, DONE = range(len(ACTIONS))

KINDS = ("key", "ball", "box", "goal")
COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
CARRYABLE = ("key", "ball", "box")
VERBS = ("goto", "pickup")

WALL, FLOOR, DOOR = "#", ".", "D"

# east, south, west, north
DIRECTIONS = ((1, 0), (0, 1), (-1, 0), (0, -1))

# Egocentric window codes
CELL_UNSEEN, CELL_FLOOR, CELL_WALL, CELL_DOOR = 0, 1, 2, 3
OBJECT_CODE_BASE = 4
N_CELL_CODES = OBJECT_CODE_BASE + len(KINDS) * len(COLORS)
VIEW_SIZE = 5

_STAGE_CODES = len(VERBS) * len(KINDS) * len(COLORS)
N_MISSION_IDS = _STAGE_CODES * (_STAGE_CODES + 1)

PLANNER_ACTIONS = (LEFT, RIGHT, FORWARD, PICKUP, DROP)


class UnsatisfiableMissionError(ValueError):
    """The mission cannot be completed from the start state within the horizon."""


class EpisodeFinishedError(RuntimeError):
    """step() was called on a terminal environment."""


class SnapshotMismatchError(ValueError):
    """A snapshot was restored into an environment built from another config."""


class PlannerError(RuntimeError):
    """The expert planner failed on a mission that passed the reachability check."""


class ObservationLimitError(RuntimeError):
    """State enumeration hit its limit before exhausting the reachable states."""


def stable_hash(document) -> int:
    """Map a JSON-serializable document to a stable non-negative 63-bit int."""
    text = json.dumps(document, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def observation_key(obs) -> bytes:
    """Canonical (injective) serialization of an observation vector."""
    return np.asarray(obs, dtype="<i8").tobytes()


def success_reward(t: int, horizon: int, penalty: float = 0.5) -> float:
    """1 - penalty * t / H, where t counts the actions taken including the successful one.

    success_reward(0, H) is 1.0; through `step` the earliest success
    is t = 1, so a one-action episode earns 1 - penalty / H.
    """
    return 1.0 - penalty * t / horizon


# ----------------------------------------------------------------------------
# Snapshots
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvState:
    """Full restorable snapshot of an environment."""

    kind: str
    config_hash: int
    payload: tuple[int, ...]

    def to_bytes(self) -> bytes:
        """Length-prefixed little-endian int64 serialization."""
        kind_code = 0 if self.kind == "rooms" else 1
        values = [kind_code, self.config_hash, *self.payload]
        return np.asarray([len(values), *values], dtype="<i8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EnvState":
        values = np.frombuffer(blob, dtype="<i8")
        if len(values) == 0 or int(values[0]) != len(values) - 1:
            raise SnapshotMismatchError("Corrupt snapshot: length prefix does not match payload")
        kind = "rooms" if int(values[1]) == 0 else "triangle"
        return cls(kind, int(values[2]), tuple(int(v) for v in values[3:]))


def _rng_words(rng: np.random.Generator) -> list[int]:
    state = rng.bit_generator.state
    words = []
    for big in (state["state"]["state"], state["state"]["inc"]):
        words.extend((big >> (32 * i)) & 0xFFFFFFFF for i in range(4))
    words.extend([state["has_uint32"], state["uinteger"]])
    return words


def _set_rng_words(rng: np.random.Generator, words) -> None:
    state_int = sum(int(w) << (32 * i) for i, w in enumerate(words[0:4]))
    inc_int = sum(int(w) << (32 * i) for i, w in enumerate(words[4:8]))
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state_int, "inc": inc_int},
        "has_uint32": int(words[8]),
        "uinteger": int(words[9]),
    }


_RNG_WORDS = 10


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    terminal: bool
    info: int


# ----------------------------------------------------------------------------
# Rooms
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MissionStage:
    verb: str
    color: str
    kind: str

    @property
    def code(self) -> int:
        return (VERBS.index(self.verb) * len(KINDS) + KINDS.index(self.kind)) * len(COLORS) + COLORS.index(self.color)

    def __str__(self):
        return f"{self.verb} {self.color} {self.kind}"


def parse_mission(text: str) -> tuple[MissionStage, ...]:
    """Parse 'goto red ball' or 'pickup blue key then goto green goal'."""
    stages = []
    for part in text.strip().lower().split(" then "):
        words = part.split()
        if len(words) != 3 or words[0] not in VERBS or words[1] not in COLORS or words[2] not in KINDS:
            raise ConfigError(f"Cannot parse mission stage '{part}' (expected '<goto|pickup> <color> <kind>')")
        stage = MissionStage(*words)
        if stage.verb == "pickup" and stage.kind not in CARRYABLE:
            raise ConfigError(f"Mission '{part}' asks to pick up a non-carryable {stage.kind}")
        stages.append(stage)
    if len(stages) > 2:
        raise ConfigError("Missions have at most two stages")
    return tuple(stages)


def mission_id(stages: tuple[MissionStage, ...]) -> int:
    second = stages[1].code + 1 if len(stages) > 1 else 0
    return stages[0].code + _STAGE_CODES * second


@dataclass(frozen=True)
class RoomsConfig:
    layout: tuple[str, ...]
    objects: tuple[tuple[str, str, tuple[int, int]], ...]
    mission: str
    horizon: int = 100
    start_cell: tuple[int, int] = (1, 1)
    start_direction: int = 0
    reward_penalty: float = 0.5

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        widths = {len(row) for row in self.layout}
        if len(widths) != 1:
            raise ConfigError("Layout rows must all have the same width")
        bad = {ch for row in self.layout for ch in row} - {WALL, FLOOR, DOOR}
        if bad:
            raise ConfigError(f"Unknown layout characters: {sorted(bad)}")
        if self.start_direction not in range(4):
            raise ConfigError(f"start_direction must be 0..3, got {self.start_direction}")
        if self.cell(self.start_cell) not in (FLOOR, DOOR):
            raise ConfigError(f"start cell {self.start_cell} is not free floor")
        seen = set()
        for kind, color, cell in self.objects:
            if kind not in KINDS or color not in COLORS:
                raise ConfigError(f"Unknown object {color} {kind}")
            if self.cell(cell) != FLOOR:
                raise ConfigError(f"Object {color} {kind} placed on a non-floor cell {cell}")
            if cell in seen or tuple(cell) == tuple(self.start_cell):
                raise ConfigError(f"Cell {cell} is occupied twice")
            seen.add(cell)
        parse_mission(self.mission)
        rooms = self.room_map
        for door in self.door_cells:
            neighbours = {rooms[n] for n in _neighbours(door) if n in rooms}
            if len(neighbours) != 2:
                raise ConfigError(f"Door at {door} connects {len(neighbours)} rooms (expected exactly 2)")

    @property
    def grid_width(self) -> int:
        return len(self.layout[0])

    @property
    def grid_height(self) -> int:
        return len(self.layout)

    def cell(self, xy) -> str:
        x, y = xy
        if 0 <= x < self.grid_width and 0 <= y < self.grid_height:
            return self.layout[y][x]
        return WALL

    @cached_property
    def door_cells(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (x, y) for y, row in enumerate(self.layout) for x, ch in enumerate(row) if ch == DOOR
        )

    @cached_property
    def room_map(self) -> dict[tuple[int, int], int]:
        """Floor cell -> room id (connected components not crossing doors)."""
        rooms: dict[tuple[int, int], int] = {}
        next_id = 0
        for y, row in enumerate(self.layout):
            for x, ch in enumerate(row):
                if ch != FLOOR or (x, y) in rooms:
                    continue
                queue = deque([(x, y)])
                rooms[(x, y)] = next_id
                while queue:
                    cur = queue.popleft()
                    for n in _neighbours(cur):
                        if self.cell(n) == FLOOR and n not in rooms:
                            rooms[n] = next_id
                            queue.append(n)
                next_id += 1
        return rooms

    @property
    def n_rooms(self) -> int:
        return len(set(self.room_map.values()))

    @cached_property
    def config_hash(self) -> int:
        return stable_hash(self.to_document())

    def to_document(self) -> dict:
        return {
            "layout": list(self.layout),
            "objects": [[k, c, list(cell)] for k, c, cell in self.objects],
            "mission": self.mission,
            "horizon": self.horizon,
            "start": list(self.start_cell),
            "direction": self.start_direction,
            "reward_penalty": self.reward_penalty,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "RoomsConfig":
        return cls(
            layout=tuple(doc["layout"]),
            objects=tuple((k, c, tuple(cell)) for k, c, cell in doc.get("objects", [])),
            mission=doc["mission"],
            horizon=int(doc.get("horizon", 100)),
            start_cell=tuple(doc.get("start", (1, 1))),
            start_direction=int(doc.get("direction", 0)),
            reward_penalty=float(doc.get("reward_penalty", 0.5)),
        )


def _neighbours(cell):
    x, y = cell
    return [(x + dx, y + dy) for dx, dy in DIRECTIONS]


def _object_code(kind: str, color: str) -> int:
    return OBJECT_CODE_BASE + KINDS.index(kind) * len(COLORS) + COLORS.index(color)


class RoomsEnv:
    """Deterministic multi-room gridworld. Use make_rooms_env() to build one."""

    kind = "rooms"
    n_actions = len(ACTIONS)

    def __init__(self, config: RoomsConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.stages = parse_mission(config.mission)
        self.mission_id = mission_id(self.stages)
        self.targets = []
        for stage in self.stages:
            matches = [
                i for i, (kind, color, _) in enumerate(config.objects)
                if kind == stage.kind and color == stage.color
            ]
            if not matches:
                raise UnsatisfiableMissionError(
                    f"Mission target '{stage.color} {stage.kind}' is not present in the layout"
                )
            self.targets.append(frozenset(matches))
        self.reset()

    # -- state ---------------------------------------------------------------

    def reset(self) -> np.ndarray:
        self.agent = tuple(self.config.start_cell)
        self.direction = self.config.start_direction
        self.carried = -1
        self.object_cells = [tuple(cell) for _, _, cell in self.config.objects]
        self.stage = 0
        self.step_count = 0
        self.terminal = False
        self.success = False
        return self.observation()

    def core_state(self) -> tuple[int, ...]:
        """Dynamics-relevant state (no step counter, no RNG)."""
        cells = [v for cell in self.object_cells for v in cell]
        return (*self.agent, self.direction, self.carried, self.stage, *cells)

    def snapshot(self) -> EnvState:
        payload = (
            *self.core_state(), self.step_count, int(self.terminal), int(self.success),
            *_rng_words(self.rng),
        )
        return EnvState(self.kind, self.config.config_hash, payload)

    def restore(self, state: EnvState) -> "RoomsEnv":
        if state.kind != self.kind or state.config_hash != self.config.config_hash:
            raise SnapshotMismatchError(
                f"Snapshot from config {state.config_hash:x} ({state.kind}) cannot be restored "
                f"into config {self.config.config_hash:x} ({self.kind})"
            )
        p = state.payload
        n_obj = len(self.config.objects)
        self.agent = (p[0], p[1])
        self.direction = p[2]
        self.carried = p[3]
        self.stage = p[4]
        cells = p[5:5 + 2 * n_obj]
        self.object_cells = [(cells[2 * i], cells[2 * i + 1]) for i in range(n_obj)]
        rest = p[5 + 2 * n_obj:]
        self.step_count = rest[0]
        self.terminal = bool(rest[1])
        self.success = bool(rest[2])
        _set_rng_words(self.rng, rest[3:3 + _RNG_WORDS])
        return self

    def clone(self) -> "RoomsEnv":
        return RoomsEnv(self.config, self.seed).restore(self.snapshot())

    # -- dynamics ------------------------------------------------------------

    def _object_at(self, cell) -> int:
        for i, obj_cell in enumerate(self.object_cells):
            if obj_cell == cell:
                return i
        return -1

    def _front(self) -> tuple[int, int]:
        dx, dy = DIRECTIONS[self.direction]
        return (self.agent[0] + dx, self.agent[1] + dy)

    def _walkable(self, cell) -> bool:
        if self.config.cell(cell) not in (FLOOR, DOOR):
            return False
        obj = self._object_at(cell)
        return obj < 0 or self.config.objects[obj][0] == "goal"

    def _stage_done(self) -> bool:
        stage, targets = self.stages[self.stage], self.targets[self.stage]
        if stage.verb == "pickup":
            return self.carried in targets
        front = self._object_at(self._front())
        here = self._object_at(self.agent)
        return front in targets or here in targets

    def step(self, action: int) -> StepOutcome:
        if self.terminal:
            raise EpisodeFinishedError("step() called after the episode terminated; call reset() or restore()")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"Invalid rooms action {action}")
        self.step_count += 1
        front = self._front()
        if action == LEFT:
            self.direction = (self.direction - 1) % 4
        elif action == RIGHT:
            self.direction = (self.direction + 1) % 4
        elif action == FORWARD:
            if self._walkable(front):
                self.agent = front
        elif action == PICKUP:
            obj = self._object_at(front)
            if self.carried < 0 and obj >= 0 and self.config.objects[obj][0] in CARRYABLE:
                self.carried = obj
                self.object_cells[obj] = (-1, -1)
        elif action == DROP:
            if self.carried >= 0 and self.config.cell(front) == FLOOR and self._object_at(front) < 0:
                self.object_cells[self.carried] = front
                self.carried = -1
        # toggle / done leave the state unchanged

        if self._stage_done():
            self.stage += 1
            if self.stage == len(self.stages):
                self.success = True

        reward = 0.0
        if self.success:
            reward = success_reward(self.step_count, self.config.horizon, self.config.reward_penalty)
        self.terminal = self.success or self.step_count >= self.config.horizon
        return StepOutcome(self.observation(), reward, self.terminal, self.room_of(self.agent))

    # -- observations --------------------------------------------------------

    def room_of(self, cell) -> int:
        return self.config.room_map.get(tuple(cell), -1)

    def _cell_code(self, cell) -> int:
        ch = self.config.cell(cell)
        x, y = cell
        if not (0 <= x < self.config.grid_width and 0 <= y < self.config.grid_height):
            return CELL_UNSEEN
        obj = self._object_at(cell)
        if obj >= 0:
            kind, color, _ = self.config.objects[obj]
            return _object_code(kind, color)
        return {FLOOR: CELL_FLOOR, WALL: CELL_WALL, DOOR: CELL_DOOR}[ch]

    def observation(self) -> np.ndarray:
        carried = 0
        if self.carried >= 0:
            kind, color, _ = self.config.objects[self.carried]
            carried = _object_code(kind, color)
        fx, fy = DIRECTIONS[self.direction]
        rx, ry = DIRECTIONS[(self.direction + 1) % 4]
        half = VIEW_SIZE // 2
        window = []
        for ahead in range(half, -half - 1, -1):
            for side in range(-half, half + 1):
                cell = (self.agent[0] + ahead * fx + side * rx, self.agent[1] + ahead * fy + side * ry)
                window.append(self._cell_code(cell))
        head = [self.agent[0], self.agent[1], self.direction, carried, self.mission_id, self.stage]
        return np.asarray(head + window, dtype=np.int64)

    @property
    def observation_cardinalities(self) -> tuple[int, ...]:
        head = (self.config.grid_width, self.config.grid_height, 4, N_CELL_CODES, N_MISSION_IDS, 3)
        return head + (N_CELL_CODES,) * (VIEW_SIZE * VIEW_SIZE)

    def signature_item(self, outcome: StepOutcome):
        return outcome.info if outcome.info >= 0 else None

    def start_signature(self) -> set:
        room = self.room_of(self.agent)
        return {room} if room >= 0 else set()

    # -- perturbation helpers --------------------------------------------------

    def free_cells(self, room_id: int) -> list[tuple[int, int]]:
        """Floor cells of a room not holding an object in the initial layout."""
        occupied = {tuple(cell) for _, _, cell in self.config.objects}
        return sorted(
            cell for cell, rid in self.config.room_map.items()
            if rid == room_id and cell not in occupied
        )

    def set_start(self, cell, direction: int) -> EnvState:
        """Reset with the agent placed at `cell`; returns the perturbed start snapshot."""
        self.reset()
        if self.config.cell(cell) != FLOOR or self._object_at(tuple(cell)) >= 0:
            raise ConfigError(f"Cell {cell} is not a free floor cell")
        self.agent = tuple(cell)
        self.direction = direction
        return self.snapshot()


def make_rooms_env(config: RoomsConfig, seed: int = 0) -> RoomsEnv:
    """Build a rooms environment and run the reachability check on its mission."""
    env = RoomsEnv(config, seed)
    if shortest_path_actions(env) is None:
        raise UnsatisfiableMissionError(
            f"Reachability check failed: mission '{config.mission}' cannot be completed "
            f"from {config.start_cell} within horizon {config.horizon}"
        )
    return env


def shortest_path_actions(env: RoomsEnv, max_nodes: int = 200_000) -> list[int] | None:
    """BFS over snapshots for the shortest action sequence completing the mission.

    Returns None when the mission cannot be completed within the remaining horizon.
    The environment itself is left untouched.
    """
    if env.terminal:
        return [] if env.success else None
    walker = RoomsEnv(env.config, env.seed)
    budget = env.config.horizon - env.step_count
    root = env.snapshot()
    parents = {env.core_state(): None}
    frontier = deque([(root, env.core_state(), 0)])
    while frontier:
        snap, key, depth = frontier.popleft()
        if depth >= budget:
            continue
        for action in PLANNER_ACTIONS:
            walker.restore(snap)
            walker.step(action)
            child = walker.core_state()
            if child in parents:
                continue
            parents[child] = (key, action)
            if walker.success:
                path = []
                while parents[child] is not None:
                    child, act = parents[child]
                    path.append(act)
                return path[::-1]
            if not walker.terminal:
                frontier.append((walker.snapshot(), child, depth + 1))
        if len(parents) > max_nodes:
            raise PlannerError(f"Planner exceeded {max_nodes} states on mission '{env.config.mission}'")
    return None


class ExpertPolicy:
    """Shortest-path expert; plans are cached along the path they were computed for."""

    def __init__(self):
        self._cache: dict[tuple, int] = {}

    def act(self, env: RoomsEnv) -> int | None:
        key = (env.config.config_hash, env.core_state())
        if key not in self._cache:
            plan = shortest_path_actions(env)
            if not plan:
                return None
            walker = env.clone()
            for action in plan:
                self._cache[(env.config.config_hash, walker.core_state())] = action
                walker.step(action)
        return self._cache[key]


# ----------------------------------------------------------------------------
# Triangle discovery
# ----------------------------------------------------------------------------

def _brute_force_triangles(n_nodes: int, adjacency: np.ndarray) -> frozenset:
    return frozenset(
        (a, b, c) for a, b, c in itertools.combinations(range(n_nodes), 3)
        if adjacency[a, b] and adjacency[b, c] and adjacency[a, c]
    )


@dataclass(frozen=True)
class TriangleConfig:
    graph_id: int
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    pretrain_seen: frozenset = field(default_factory=frozenset)
    sequence_length: int = 3

    def __post_init__(self):
        if not 3 <= self.n_nodes <= 64:
            raise ConfigError(f"n_nodes must lie in [3, 64] at desk scale, got {self.n_nodes}")
        for u, v in self.edges:
            if u == v:
                raise ConfigError(f"Self-loop at node {u}")
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ConfigError(f"Edge ({u}, {v}) outside node range")
        adj = self.adjacency
        if not np.array_equal(adj, adj.T):
            raise ConfigError("Adjacency is not symmetric")
        if self.triangle_census != _brute_force_triangles(self.n_nodes, adj):
            raise ConfigError("Triangle census disagrees with brute-force enumeration")
        if not self.pretrain_seen <= self.triangle_census:
            raise ConfigError("pretrain_seen contains triples that are not triangles")

    @cached_property
    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for u, v in self.edges:
            adj[u, v] = adj[v, u] = True
        return adj

    @cached_property
    def triangle_census(self) -> frozenset:
        """All triangles as sorted node triples (edge-wise common neighbours)."""
        adj = self.adjacency
        found = set()
        for u, v in self.edges:
            a, b = min(u, v), max(u, v)
            for w in np.flatnonzero(adj[a] & adj[b]):
                found.add(tuple(sorted((a, b, int(w)))))
        return frozenset(found)

    @cached_property
    def config_hash(self) -> int:
        return stable_hash(self.to_document())

    def to_document(self) -> dict:
        return {
            "graph_id": self.graph_id,
            "n_nodes": self.n_nodes,
            "edges": [list(e) for e in self.edges],
            "pretrain_seen": sorted(list(t) for t in self.pretrain_seen),
        }

    @classmethod
    def from_document(cls, doc: dict) -> "TriangleConfig":
        return cls(
            graph_id=int(doc["graph_id"]),
            n_nodes=int(doc["n_nodes"]),
            edges=tuple(tuple(sorted(e)) for e in doc["edges"]),
            pretrain_seen=frozenset(tuple(sorted(t)) for t in doc.get("pretrain_seen", [])),
        )


def triangle_verify(graph: TriangleConfig, tokens) -> bool:
    """True iff the three tokens are distinct, in range and pairwise adjacent."""
    if len(tokens) != 3:
        return False
    if any(not 0 <= t < graph.n_nodes for t in tokens):
        return False
    a, b, c = (int(t) for t in tokens)
    if len({a, b, c}) < 3:
        return False
    adj = graph.adjacency
    return bool(adj[a, b] and adj[b, c] and adj[a, c])


def triangle_identity(tokens) -> tuple[int, ...]:
    return tuple(sorted(int(t) for t in tokens))


class TriangleEnv:
    kind = "triangle"

    def __init__(self, config: TriangleConfig, seed: int = 0, vocab_size: int | None = None):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.n_actions = vocab_size or config.n_nodes
        self.reset()

    def reset(self) -> np.ndarray:
        self.tokens: list[int] = []
        self.step_count = 0
        self.terminal = False
        self.success = False
        return self.observation()

    def core_state(self) -> tuple[int, ...]:
        return tuple(self.tokens)

    def snapshot(self) -> EnvState:
        padded = self.tokens + [-1] * (self.config.sequence_length - len(self.tokens))
        payload = (*padded, self.step_count, int(self.terminal), int(self.success), *_rng_words(self.rng))
        return EnvState(self.kind, self.config.config_hash, payload)

    def restore(self, state: EnvState) -> "TriangleEnv":
        if state.kind != self.kind or state.config_hash != self.config.config_hash:
            raise SnapshotMismatchError(
                f"Snapshot from config {state.config_hash:x} ({state.kind}) cannot be restored "
                f"into graph {self.config.graph_id} ({self.kind})"
            )
        L = self.config.sequence_length
        p = state.payload
        self.tokens = [t for t in p[:L] if t >= 0]
        self.step_count, self.terminal, self.success = p[L], bool(p[L + 1]), bool(p[L + 2])
        _set_rng_words(self.rng, p[L + 3:L + 3 + _RNG_WORDS])
        return self

    def clone(self) -> "TriangleEnv":
        return TriangleEnv(self.config, self.seed, self.n_actions).restore(self.snapshot())

    def step(self, action: int) -> StepOutcome:
        if self.terminal:
            raise EpisodeFinishedError("step() called after the sequence was completed")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"Token {action} outside vocabulary of size {self.n_actions}")
        self.tokens.append(int(action))
        self.step_count += 1
        reward = 0.0
        if len(self.tokens) == self.config.sequence_length:
            self.terminal = True
            self.success = triangle_verify(self.config, self.tokens)
            reward = 1.0 if self.success else 0.0
        return StepOutcome(self.observation(), reward, self.terminal, int(action))

    def observation(self) -> np.ndarray:
        padded = [t + 1 for t in self.tokens] + [0] * (self.config.sequence_length - len(self.tokens))
        return np.asarray([self.config.graph_id, len(self.tokens), *padded], dtype=np.int64)

    @property
    def observation_cardinalities(self) -> tuple[int, ...]:
        L = self.config.sequence_length
        return (64, L + 1) + (self.n_actions + 1,) * L

    def signature_item(self, outcome: StepOutcome):
        return outcome.info

    def start_signature(self) -> set:
        return set(self.tokens)


def make_triangle_env(config: TriangleConfig, seed: int = 0, vocab_size: int | None = None) -> TriangleEnv:
    return TriangleEnv(config, seed, vocab_size)


def make_triangle_graph(graph_id: int, n_nodes: int = 30, edge_prob: float = 0.25,
                        seed: int = 0, seen_fraction: float = 0.5) -> TriangleConfig:
    """Random G(n, p) graph; a seeded fraction of its triangles is marked as seen in pretraining."""
    rng = np.random.default_rng([seed, graph_id])
    edges = tuple(
        (u, v) for u, v in itertools.combinations(range(n_nodes), 2) if rng.random() < edge_prob
    )
    draft = TriangleConfig(graph_id, n_nodes, edges)
    census = sorted(draft.triangle_census)
    n_seen = int(round(seen_fraction * len(census)))
    picks = rng.permutation(len(census))[:n_seen]
    return TriangleConfig(graph_id, n_nodes, edges, frozenset(census[i] for i in picks))


# ----------------------------------------------------------------------------
# Suites and IO
# ----------------------------------------------------------------------------

def make_two_room_suite(count: int, seed: int = 0, width: int = 8, height: int = 8,
                        horizon: int = 100, compositional: bool = False) -> list[RoomsConfig]:
    """Seeded two-room configurations with a random door, objects, start and mission."""
    rng = np.random.default_rng(seed)
    wall_x = width // 2
    configs = []
    attempts = 0
    while len(configs) < count:
        attempts += 1
        if attempts > 100 * count:
            raise ConfigError("Could not generate enough satisfiable two-room configurations")
        door_y = int(rng.integers(1, height - 1))
        rows = []
        for y in range(height):
            row = []
            for x in range(width):
                if x in (0, width - 1) or y in (0, height - 1):
                    row.append(WALL)
                elif x == wall_x:
                    row.append(DOOR if y == door_y else WALL)
                else:
                    row.append(FLOOR)
            rows.append("".join(row))
        floor = [(x, y) for y in range(height) for x in range(width) if rows[y][x] == FLOOR]
        # keep the door approaches clear so both rooms stay connected
        floor = [c for c in floor if c not in ((wall_x - 1, door_y), (wall_x + 1, door_y))]
        picks = rng.permutation(len(floor))
        n_objects = int(rng.integers(2, 4))
        cells = [floor[i] for i in picks[:n_objects + 1]]
        start, object_cells = cells[0], cells[1:]
        objects = []
        used = set()
        for cell in object_cells:
            while True:
                kind = CARRYABLE[int(rng.integers(len(CARRYABLE)))]
                color = COLORS[int(rng.integers(len(COLORS)))]
                if (kind, color) not in used:
                    used.add((kind, color))
                    break
            objects.append((kind, color, cell))
        target = objects[int(rng.integers(len(objects)))]
        verb = VERBS[int(rng.integers(len(VERBS)))]
        mission = f"{verb} {target[1]} {target[0]}"
        if compositional and len(objects) > 1:
            other = [o for o in objects if o is not target][0]
            mission = f"pickup {target[1]} {target[0]} then goto {other[1]} {other[0]}"
        try:
            config = RoomsConfig(
                layout=tuple(rows), objects=tuple(objects), mission=mission, horizon=horizon,
                start_cell=start, start_direction=int(rng.integers(4)),
            )
            make_rooms_env(config, seed)
        except (ConfigError, UnsatisfiableMissionError):
            continue
        configs.append(config)
    return configs


def load_rooms_suite(path: str | Path) -> list[RoomsConfig]:
    with open(path) as f:
        documents = json.load(f)
    if isinstance(documents, dict):
        documents = [documents]
    return [RoomsConfig.from_document(doc) for doc in documents]


def load_graph_suite(path: str | Path) -> list[TriangleConfig]:
    with open(path) as f:
        documents = json.load(f)
    if isinstance(documents, dict):
        documents = [documents]
    return [TriangleConfig.from_document(doc) for doc in documents]


def save_suite(configs, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump([c.to_document() for c in configs], f, indent=1)


def make_env(config, seed: int = 0, vocab_size: int | None = None):
    """Environment for either config type (rooms reachability is checked)."""
    if isinstance(config, RoomsConfig):
        return make_rooms_env(config, seed)
    return make_triangle_env(config, seed, vocab_size)


def enumerate_observation_keys(env, limit: int = 200_000) -> list[bytes]:
    """Observation keys of every state reachable from the env's current state (BFS)."""
    walker = env.clone()
    root = env.snapshot()
    seen_states = {env.core_state()}
    keys = {observation_key(env.observation()): None}
    frontier = deque([root])
    actions = PLANNER_ACTIONS if env.kind == "rooms" else range(env.n_actions)
    while frontier and len(seen_states) < limit:
        snap = frontier.popleft()
        for action in actions:
            walker.restore(snap)
            outcome = walker.step(action)
            state = walker.core_state()
            if state in seen_states:
                continue
            seen_states.add(state)
            keys.setdefault(observation_key(outcome.observation), None)
            if not walker.terminal:
                frontier.append(walker.snapshot())
    if frontier:
        raise ObservationLimitError(
            f"More than {limit:,} reachable states; raise the key limit or use the mlp parameterization"
        )
    return list(keys)


# ----------------------------------------------------------------------------
# Pretraining data
# ----------------------------------------------------------------------------

@dataclass
class Demo:
    config_index: int
    actions: list[int]
    success: bool


@dataclass
class Dataset:
    kind: str
    observations: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    demos: list[Demo] = field(default_factory=list)
    sample_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)

    def add(self, obs, action):
        self.observations.append(np.asarray(obs, dtype=np.int64))
        self.actions.append(int(action))


def generate_pretraining_data(env_kind: str, configs, count: int, noise: float = 0.25,
                              seed: int = 0, triangle_prob: float = 1 / 3,
                              verbose: bool = False) -> Dataset:
    """Expert (rooms) or triangle/edge (triangle) pretraining pairs.

    rooms:    `count` planner demonstrations per configuration; every expert
              action is replaced by a uniform random action with probability `noise`.
    triangle: `count` samples per graph; a seen triangle with probability
              `triangle_prob`, otherwise an edge (two tokens).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    data = Dataset(env_kind)

    if env_kind == "rooms":
        expert = ExpertPolicy()
        for index, config in enumerate(configs):
            env = make_rooms_env(config, seed)
            for _ in range(count):
                env.reset()
                actions = []
                while not env.terminal:
                    action = expert.act(env)
                    if action is None:
                        if env.step_count == 0:
                            raise PlannerError(
                                f"Planner found no path for satisfiable mission '{config.mission}'"
                            )
                        action = int(rng.integers(env.n_actions))
                    if rng.random() < noise:
                        action = int(rng.integers(env.n_actions))
                    data.add(env.observation(), action)
                    actions.append(action)
                    env.step(action)
                data.demos.append(Demo(index, actions, env.success))
            if verbose:
                wins = sum(d.success for d in data.demos if d.config_index == index)
                print(f"  Config {index}: {wins}/{count} demos successful")
        data.sample_counts = {"demos": len(data.demos)}

    elif env_kind == "triangle":
        bare = [c.graph_id for c in configs if not c.edges]
        if bare:
            raise ConfigError(f"Graphs {bare} have no edges to sample pretraining pairs from")
        n_triangles = n_edges = 0
        for config in configs:
            env = make_triangle_env(config, seed)
            seen = sorted(config.pretrain_seen)
            for _ in range(count):
                if seen and rng.random() < triangle_prob:
                    tokens = [int(t) for t in rng.permutation(list(seen[int(rng.integers(len(seen)))]))]
                    n_triangles += 1
                else:
                    u, v = config.edges[int(rng.integers(len(config.edges)))]
                    tokens = [u, v] if rng.random() < 0.5 else [v, u]
                    n_edges += 1
                env.reset()
                for token in tokens:
                    data.add(env.observation(), token)
                    env.step(token)
        data.sample_counts = {"triangle": n_triangles, "edge": n_edges}
        if verbose:
            print(f"  {n_triangles:,} triangle samples, {n_edges:,} edge samples")
    else:
        raise ConfigError(f"Unknown environment kind '{env_kind}'")
    return data
