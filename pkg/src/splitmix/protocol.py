"""Round orchestration: mixer -> clients -> server -> clients, over a
simulated transport with byte-exact framing and traffic accounting.

Message flow per round (networked modes): the mixer draws ratios and masks
and unicasts them; clients upload noised (possibly cutout) smashed data and
noisy labels; the server aggregates per mixing group, runs the shared upper
segment, updates it, and unicasts each client's cut-layer gradient; clients
update their lower segments. The standalone mode trains fully local models
and sends nothing.

Every payload that crosses the boundary is actually serialized and parsed
back, so the traffic ledger counts real bytes and the server only ever sees
what the wire carries.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .accountant import verify_theorem1
from .dp import PrivacyParams, clamp_smashed, gaussianize_label, gaussianize_smashed
from .errors import ParameterError, ProtocolError, ShapeError
from .interpolation import (MixedBatchItem, SmashedData, cutout, mix_labels, mixup,
                            patch_cutmix_aggregate, vanilla_cutmix)
from .mixer import MixingRatios, PatchMask, build_patch_masks, draw_mixing_ratios
from .numeric import SeededRng
from .vit import (LowerSegment, ModelConfig, UpperSegment, backward_and_cut_gradients,
                  evaluate_accuracy, init_train_state, loss_soft_ce, serialize_params,
                  deserialize_params, sgd_step)

MIX_MODES = ("plain_sl", "dp_sl", "dp_mixsl", "dp_cutmixsl", "vanilla_cutmix",
             "standalone_cutout")

# role ids on the wire
SERVER_ID = 0xFFFF
MIXER_ID = 0xFFFE

# message kinds
MASK_DOWN = 1
SMASHED_UP = 2
LABEL_UP = 3
CUT_GRAD_DOWN = 4
LOWER_WEIGHTS_UP = 5
AVG_WEIGHTS_DOWN = 6

KIND_NAMES = {MASK_DOWN: "mask_down", SMASHED_UP: "smashed_up", LABEL_UP: "label_up",
              CUT_GRAD_DOWN: "cut_grad_down", LOWER_WEIGHTS_UP: "lower_weights_up",
              AVG_WEIGHTS_DOWN: "avg_weights_down"}

_STAGE = {MASK_DOWN: 0, SMASHED_UP: 1, LABEL_UP: 1, CUT_GRAD_DOWN: 2,
          LOWER_WEIGHTS_UP: 3, AVG_WEIGHTS_DOWN: 4}

FRAME_HEADER = struct.Struct("<BHHII")  # kind, sender, receiver, round, payload length

# rng stream purpose tags
P_INIT_MODEL = 0x01
P_DATASET = 0x02
P_SHARDS = 0x03
P_EPOCH_SHUFFLE = 0x11
P_GROUPING = 0x20
P_RATIOS = 0x21
P_MASKS = 0x22
P_NOISE_S = 0x30
P_NOISE_Y = 0x31
P_BOX = 0x32
P_STANDALONE_MASK = 0x33
P_ATTACK = 0x40


@dataclass(frozen=True)
class RoundMessage:
    kind: int
    sender: int
    receiver: int
    round: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return FRAME_HEADER.pack(self.kind, self.sender, self.receiver, self.round,
                                 len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RoundMessage":
        kind, sender, receiver, rnd, length = FRAME_HEADER.unpack_from(blob, 0)
        payload = blob[FRAME_HEADER.size:FRAME_HEADER.size + length]
        if len(payload) != length:
            raise ProtocolError("frame payload truncated")
        return cls(kind, sender, receiver, rnd, payload)


@dataclass
class TrafficRow:
    round: int
    kind: int
    sender: int
    receiver: int
    payload_bytes: int
    direction: str


class TrafficLog:
    """Per-message payload byte counts with client-centric direction labels."""

    def __init__(self):
        self.rows = []

    def add(self, msg: RoundMessage):
        if msg.sender not in (SERVER_ID, MIXER_ID):
            direction = "up"
        elif msg.receiver not in (SERVER_ID, MIXER_ID):
            direction = "down"
        else:
            direction = "coord"
        self.rows.append(TrafficRow(msg.round, msg.kind, msg.sender, msg.receiver,
                                    len(msg.payload), direction))

    def total(self, direction=None, kind=None, rounds=None):
        return sum(r.payload_bytes for r in self.rows
                   if (direction is None or r.direction == direction)
                   and (kind is None or r.kind == kind)
                   and (rounds is None or r.round in rounds))


class Transport:
    """In-process transport enforcing the per-round message order.

    Within a round the stage sequence MaskDown -> SmashedUp/LabelUp ->
    CutGradDown (-> weight averaging) must be non-decreasing and must open
    with MaskDown; rounds must not go backwards.
    """

    def __init__(self, log: TrafficLog):
        self.log = log
        self._round = -1
        self._stage = -1
        self._mailboxes = {}

    def send(self, kind, sender, receiver, round_idx, payload: bytes) -> RoundMessage:
        if round_idx < self._round:
            raise ProtocolError(f"round {round_idx} after round {self._round} began")
        if round_idx > self._round:
            self._round = round_idx
            self._stage = -1
        stage = _STAGE[kind]
        if self._stage == -1 and kind != MASK_DOWN:
            raise ProtocolError(
                f"round must open with mask_down, got {KIND_NAMES[kind]}")
        if stage < self._stage:
            raise ProtocolError(
                f"{KIND_NAMES[kind]} arrived after a later-stage message in round {round_idx}")
        self._stage = stage
        msg = RoundMessage(kind, sender, receiver, round_idx, payload)
        # round-trip through the wire encoding so only framed bytes are delivered
        delivered = RoundMessage.from_bytes(msg.to_bytes())
        self.log.add(delivered)
        self._mailboxes.setdefault(receiver, []).append(delivered)
        return delivered

    def collect(self, receiver, kind=None):
        """Pop (and return) this receiver's pending messages, optionally by kind."""
        box = self._mailboxes.get(receiver, [])
        if kind is None:
            taken, rest = box, []
        else:
            taken = [m for m in box if m.kind == kind]
            rest = [m for m in box if m.kind != kind]
        self._mailboxes[receiver] = rest
        return taken


# --- payload codecs -------------------------------------------------------

def encode_sparse_patches(patches: np.ndarray, rows) -> bytes:
    """[num_patches u32][n_sel u32][features u32] then (idx u16, f64le row) entries."""
    n, feat = patches.shape
    rows = sorted(int(r) for r in rows)
    out = [struct.pack("<III", n, len(rows), feat)]
    for r in rows:
        out.append(struct.pack("<H", r))
        out.append(patches[r].astype("<f8").tobytes())
    return b"".join(out)


def decode_sparse_patches(blob: bytes) -> tuple:
    n, n_sel, feat = struct.unpack_from("<III", blob, 0)
    offset = 12
    patches = np.zeros((n, feat))
    rows = []
    for _ in range(n_sel):
        (idx,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        patches[idx] = np.frombuffer(blob, dtype="<f8", count=feat, offset=offset)
        offset += 8 * feat
        rows.append(idx)
    return patches, rows


def sparse_payload_bytes(num_selected: int, features: int) -> int:
    return 12 + num_selected * (2 + 8 * features)


def encode_label(y: np.ndarray) -> bytes:
    return struct.pack("<I", y.shape[0]) + y.astype("<f8").tobytes()


def decode_label(blob: bytes) -> np.ndarray:
    (dim,) = struct.unpack_from("<I", blob, 0)
    return np.frombuffer(blob, dtype="<f8", count=dim, offset=4).astype(np.float64)


def encode_mask_down(local_index: int, lambdas, num_patches: int, assignment) -> bytes:
    """Group metadata: recipient's local index, the lambda vector, and (for
    patch-cutmix) the patch-to-client assignment, one byte per patch."""
    g = len(lambdas)
    out = [struct.pack("<HH", local_index, g)]
    out.append(np.asarray(lambdas, dtype="<f8").tobytes())
    if assignment is None:
        out.append(struct.pack("<IB", num_patches, 0))
    else:
        if len(assignment) != num_patches:
            raise ShapeError("assignment length must equal the patch count")
        out.append(struct.pack("<IB", num_patches, 1))
        out.append(bytes(assignment))
    return b"".join(out)


def decode_mask_down(blob: bytes) -> dict:
    local_index, g = struct.unpack_from("<HH", blob, 0)
    offset = 4
    lambdas = np.frombuffer(blob, dtype="<f8", count=g, offset=offset)
    offset += 8 * g
    num_patches, has_assign = struct.unpack_from("<IB", blob, offset)
    offset += 5
    assignment = None
    if has_assign:
        assignment = list(blob[offset:offset + num_patches])
    return {"local_index": local_index, "lambdas": tuple(float(v) for v in lambdas),
            "num_patches": num_patches, "assignment": assignment}


def masks_to_assignment(masks) -> bytes:
    n = masks[0].num_patches
    assign = bytearray(n)
    for local, m in enumerate(masks):
        for idx in m.selected:
            assign[idx] = local
    return bytes(assign)


def assignment_to_masks(assignment, group_size: int, client_ids=None):
    n = len(assignment)
    if client_ids is None:
        client_ids = list(range(group_size))
    sel = [set() for _ in range(group_size)]
    for idx, local in enumerate(assignment):
        sel[local].add(idx)
    return [PatchMask(client_id=client_ids[i], selected=frozenset(sel[i]), num_patches=n)
            for i in range(group_size)]


# --- experiment configuration ----------------------------------------------

_DATASET_DEFAULTS = {"type": "synthetic", "classes": 4, "count": 400, "height": 16,
                     "width": 16, "channels": 1, "noise": 0.1, "train_fraction": 0.8}
_MODEL_DEFAULTS = {"patch_size": 4, "embed_dim": 32, "blocks": 2, "heads": 2,
                   "mlp_ratio": 2}
_PRIVACY_DEFAULTS = {"delta_bound": 0.2, "sigma_s": 0.0, "sigma_y": 0.0, "d_s": 20,
                     "d_y": 10, "alpha": 2.0}


@dataclass(frozen=True)
class ExperimentConfig:
    num_clients: int = 10
    group_size: int = 2
    mix_mode: str = "dp_cutmixsl"
    lambda_mode: str = "uniform"
    dirichlet_concentration: float = 1.0
    privacy: PrivacyParams = None
    fedavg_lower: bool = False
    epochs: int = 30
    learning_rate: float = 0.1
    seed: int = 0
    cutout_keep: float = 0.5
    eval_every: int = 1
    model: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ParameterError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.group_size <= self.num_clients:
            raise ParameterError(
                f"group_size must lie in [1, num_clients], got {self.group_size}")
        if self.mix_mode not in MIX_MODES:
            raise ParameterError(f"unknown mix_mode {self.mix_mode!r}")
        if self.lambda_mode not in ("uniform", "dirichlet"):
            raise ParameterError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.cutout_keep <= 1:
            raise ParameterError(f"cutout_keep must lie in (0, 1], got {self.cutout_keep}")
        if self.eval_every < 1:
            raise ParameterError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.privacy is None:
            object.__setattr__(self, "privacy", PrivacyParams(**_PRIVACY_DEFAULTS))
        object.__setattr__(self, "model", {**_MODEL_DEFAULTS, **self.model})
        object.__setattr__(self, "dataset", {**_DATASET_DEFAULTS, **self.dataset})

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        if "privacy" in raw and isinstance(raw["privacy"], dict):
            merged = {**_PRIVACY_DEFAULTS, **raw["privacy"]}
            extra = set(merged) - set(_PRIVACY_DEFAULTS)
            if extra:
                raise ParameterError(f"unknown privacy keys: {sorted(extra)}")
            raw["privacy"] = PrivacyParams(**merged)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ParameterError(str(exc)) from exc

    def to_dict(self) -> dict:
        p = self.privacy
        return {
            "num_clients": self.num_clients,
            "group_size": self.group_size,
            "mix_mode": self.mix_mode,
            "lambda_mode": self.lambda_mode,
            "dirichlet_concentration": self.dirichlet_concentration,
            "privacy": {"delta_bound": p.delta_bound, "sigma_s": p.sigma_s,
                        "sigma_y": p.sigma_y, "d_s": p.d_s, "d_y": p.d_y,
                        "alpha": p.alpha},
            "fedavg_lower": self.fedavg_lower,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "cutout_keep": self.cutout_keep,
            "eval_every": self.eval_every,
            "model": dict(self.model),
            "dataset": dict(self.dataset),
        }

    def model_config(self, dataset) -> ModelConfig:
        return ModelConfig(image_height=dataset.images.shape[1],
                           image_width=dataset.images.shape[2],
                           channels=dataset.images.shape[3],
                           classes=dataset.classes, **self.model)

    def nominal_ratios(self) -> MixingRatios:
        """Configured per-group ratios for accounting: uniform 1/group_size."""
        return MixingRatios(tuple([1.0 / self.group_size] * self.group_size))


def form_groups(rng: SeededRng, client_ids, group_size: int):
    """Random partition of clients into groups of group_size; when group_size
    does not divide the count, the final group takes the remainder."""
    client_ids = list(client_ids)
    if group_size > len(client_ids):
        raise ParameterError(
            f"group_size {group_size} exceeds number of clients {len(client_ids)}")
    order = [client_ids[i] for i in rng.generator().permutation(len(client_ids))]
    return [order[i:i + group_size] for i in range(0, len(order), group_size)]


def fedavg_lower(lowers) -> LowerSegment:
    """Parameterwise arithmetic mean of identically-shaped lower segments."""
    lowers = list(lowers)
    first = lowers[0]
    avg = {}
    for name, value in first.params.items():
        stack = []
        for seg in lowers:
            other = seg.params[name]
            if other.shape != value.shape:
                raise ShapeError(f"architecture mismatch on {name}")
            stack.append(other)
        avg[name] = np.mean(stack, axis=0)
    return LowerSegment(first.config, avg)


def one_hot(label: int, classes: int) -> np.ndarray:
    y = np.zeros(classes)
    y[int(label)] = 1.0
    return y


class Simulation:
    """Deterministic event loop driving Algorithm-1 rounds for one config."""

    def __init__(self, config: ExperimentConfig, dataset):
        self.config = config
        self.dataset = dataset
        self.root = SeededRng(config.seed)
        self.model_config = config.model_config(dataset)
        n = config.num_clients
        state = init_train_state(self.model_config, n, config.learning_rate,
                                 self.root.stream(P_INIT_MODEL))
        self.lowers = state.lowers
        self.upper = state.upper
        self.standalone = config.mix_mode == "standalone_cutout"
        self.uppers = [self.upper.copy() for _ in range(n)] if self.standalone else None
        self.traffic = TrafficLog()
        self.transport = Transport(self.traffic)
        self._pending_pre = {}
        self._shards = self._make_shards()
        self.rounds_per_epoch = len(self._shards[0])
        self.total_rounds = config.epochs * self.rounds_per_epoch
        self._last_acc = None

    def _make_shards(self):
        n = self.config.num_clients
        train = self.dataset.train_count
        per = train // n
        if per < 1:
            raise ParameterError(
                f"{train} training images cannot cover {n} clients")
        perm = self.root.stream(P_SHARDS).generator().permutation(train)
        return [perm[c * per:(c + 1) * per] for c in range(n)]

    def _sample_index(self, client: int, round_idx: int) -> int:
        shard = self._shards[client]
        epoch = round_idx // len(shard)
        pos = round_idx % len(shard)
        order = self.root.stream(P_EPOCH_SHUFFLE, epoch, client).generator().permutation(
            len(shard))
        return int(shard[order[pos]])

    # --- client-side mechanism -------------------------------------------

    def _client_upload(self, client: int, round_idx: int, mask: PatchMask):
        """Lower forward plus the mode's clamp/cutout/noise pipeline.

        The [0, delta_bound] clamp is part of the cut-layer interface in
        every mode (the bound the accounting assumes must hold for what any
        mode uploads); plain_sl differs only in skipping noise and keeping
        labels clean. Pre-clamp activations are cached so the lower update
        can apply the clamp derivative when the cut gradient arrives.

        Returns (upload SmashedData, rows to serialize, label to upload).
        """
        cfg = self.config
        p = cfg.privacy
        idx = self._sample_index(client, round_idx)
        image = self.dataset.images[idx]
        label = one_hot(self.dataset.labels[idx], self.dataset.classes)
        pre = self.lowers[client].forward(image)
        self._pending_pre[client] = pre.patches
        clamped = clamp_smashed(pre.patches, p.delta_bound)
        noiseless = cfg.mix_mode == "plain_sl"
        if cfg.mix_mode == "dp_cutmixsl":
            masked = cutout(SmashedData(clamped, client), mask)
            noised = gaussianize_smashed(self.root.stream(P_NOISE_S, round_idx, client),
                                         masked.patches, mask, p.sigma_s)
            rows = sorted(mask.selected)
        else:
            full = PatchMask(client_id=client,
                             selected=frozenset(range(pre.num_patches)),
                             num_patches=pre.num_patches)
            noised = gaussianize_smashed(self.root.stream(P_NOISE_S, round_idx, client),
                                         clamped, full, 0.0 if noiseless else p.sigma_s)
            rows = list(range(pre.num_patches))
        if noiseless:
            return SmashedData(noised, client), rows, label
        noisy_label = gaussianize_label(self.root.stream(P_NOISE_Y, round_idx, client),
                                        label, p.sigma_y)
        return SmashedData(noised, client), rows, noisy_label

    def _lower_update(self, client: int, cut_grad: np.ndarray):
        """SGD on the lower segment with the clamp derivative applied."""
        pre = self._pending_pre.pop(client)
        inside = (pre > 0.0) & (pre < self.config.privacy.delta_bound)
        lower_grads = self.lowers[client].backward(cut_grad * inside)
        sgd_step(self.lowers[client].params, lower_grads, self.config.learning_rate)

    # --- round bodies ------------------------------------------------------

    def _run_round_networked(self, round_idx: int):
        cfg = self.config
        groups = form_groups(self.root.stream(P_GROUPING, round_idx),
                             range(cfg.num_clients), cfg.group_size)
        n_patches = self.model_config.num_patches
        group_meta = []
        for gi, group in enumerate(groups):
            ratios = draw_mixing_ratios(self.root.stream(P_RATIOS, round_idx, gi),
                                        len(group), cfg.lambda_mode,
                                        cfg.dirichlet_concentration)
            assignment = None
            masks = None
            if cfg.mix_mode == "dp_cutmixsl":
                masks = build_patch_masks(self.root.stream(P_MASKS, round_idx, gi),
                                          ratios, n_patches, client_ids=list(group))
                assignment = masks_to_assignment(masks)
            for local, cid in enumerate(group):
                payload = encode_mask_down(local, ratios.lambdas, n_patches, assignment)
                self.transport.send(MASK_DOWN, MIXER_ID, cid, round_idx, payload)
            payload = encode_mask_down(0xFFFF, ratios.lambdas, n_patches, assignment)
            self.transport.send(MASK_DOWN, MIXER_ID, SERVER_ID, round_idx, payload)
            group_meta.append((group, ratios, masks))

        # clients upload
        for group, ratios, masks in group_meta:
            for local, cid in enumerate(group):
                info = decode_mask_down(self.transport.collect(cid, MASK_DOWN)[0].payload)
                mask = None
                if info["assignment"] is not None:
                    mask = assignment_to_masks(info["assignment"], len(group),
                                               client_ids=list(group))[info["local_index"]]
                upload, rows, noisy_label = self._client_upload(cid, round_idx, mask)
                self.transport.send(SMASHED_UP, cid, SERVER_ID, round_idx,
                                    encode_sparse_patches(upload.patches, rows))
                self.transport.send(LABEL_UP, cid, SERVER_ID, round_idx,
                                    encode_label(noisy_label))

        # server aggregates what actually arrived on the wire
        uploads = {}
        labels = {}
        for msg in self.transport.collect(SERVER_ID, SMASHED_UP):
            patches, _ = decode_sparse_patches(msg.payload)
            uploads[msg.sender] = SmashedData(patches, msg.sender)
        for msg in self.transport.collect(SERVER_ID, LABEL_UP):
            labels[msg.sender] = decode_label(msg.payload)
        server_meta = [decode_mask_down(m.payload)
                       for m in self.transport.collect(SERVER_ID, MASK_DOWN)]

        items = []
        for (group, ratios, _), info in zip(group_meta, server_meta):
            lams = info["lambdas"]
            if cfg.mix_mode == "dp_cutmixsl":
                masks = assignment_to_masks(info["assignment"], len(group),
                                            client_ids=list(group))
                mixed = patch_cutmix_aggregate(
                    [(uploads[cid], masks[j]) for j, cid in enumerate(group)])
                label = mix_labels([(labels[cid], lams[j]) for j, cid in enumerate(group)])
                items.append(MixedBatchItem(mixed, label, tuple(
                    (cid, lams[j], masks[j]) for j, cid in enumerate(group))))
            elif cfg.mix_mode == "dp_mixsl":
                mixed = mixup([(uploads[cid], lams[j]) for j, cid in enumerate(group)])
                label = mix_labels([(labels[cid], lams[j]) for j, cid in enumerate(group)])
                items.append(MixedBatchItem(mixed, label, tuple(
                    (cid, lams[j], None) for j, cid in enumerate(group))))
            elif cfg.mix_mode == "vanilla_cutmix":
                items.extend(self._vanilla_items(group, lams, uploads, labels,
                                                 round_idx))
            else:  # plain_sl / dp_sl: one item per client
                for cid in group:
                    full = PatchMask(client_id=cid,
                                     selected=frozenset(range(n_patches)),
                                     num_patches=n_patches)
                    items.append(MixedBatchItem(uploads[cid], labels[cid],
                                                ((cid, 1.0, full),)))

        loss, upper_grads, cut_grads = backward_and_cut_gradients(self.upper, items)
        sgd_step(self.upper.params, upper_grads, cfg.learning_rate)
        for cid, grad in cut_grads.items():
            rows = [int(r) for r in np.flatnonzero(np.any(grad != 0.0, axis=1))]
            self.transport.send(CUT_GRAD_DOWN, SERVER_ID, cid, round_idx,
                                encode_sparse_patches(grad, rows))
        for cid in range(cfg.num_clients):
            msgs = self.transport.collect(cid, CUT_GRAD_DOWN)
            if not msgs:
                continue
            grad, _ = decode_sparse_patches(msgs[0].payload)
            self._lower_update(cid, grad)

        if cfg.fedavg_lower:
            for cid in range(cfg.num_clients):
                self.transport.send(LOWER_WEIGHTS_UP, cid, SERVER_ID, round_idx,
                                    serialize_params(self.lowers[cid].params))
            received = [deserialize_params(m.payload)
                        for m in self.transport.collect(SERVER_ID, LOWER_WEIGHTS_UP)]
            averaged = fedavg_lower([LowerSegment(self.model_config, p) for p in received])
            blob = serialize_params(averaged.params)
            for cid in range(cfg.num_clients):
                self.transport.send(AVG_WEIGHTS_DOWN, SERVER_ID, cid, round_idx, blob)
            for cid in range(cfg.num_clients):
                msg = self.transport.collect(cid, AVG_WEIGHTS_DOWN)[0]
                self.lowers[cid] = LowerSegment(self.model_config,
                                                deserialize_params(msg.payload))
        return loss / max(len(items), 1)

    def _vanilla_items(self, group, lams, uploads, labels, round_idx):
        items = []
        n_patches = self.model_config.num_patches
        for pair_start in range(0, len(group) - 1, 2):
            cid_a, cid_b = group[pair_start], group[pair_start + 1]
            lam_pair = lams[pair_start] / (lams[pair_start] + lams[pair_start + 1])
            mixed, lam_eff = vanilla_cutmix(
                uploads[cid_a], uploads[cid_b], lam_pair,
                self.root.stream(P_BOX, round_idx, cid_a))
            box_rows = frozenset(int(r) for r in np.flatnonzero(
                np.any(mixed.patches != uploads[cid_a].patches, axis=1)))
            mask_b = PatchMask(cid_b, box_rows, n_patches)
            mask_a = PatchMask(cid_a, frozenset(range(n_patches)) - box_rows, n_patches)
            label = mix_labels([(labels[cid_a], lam_eff), (labels[cid_b], 1.0 - lam_eff)])
            items.append(MixedBatchItem(mixed, label,
                                        ((cid_a, lam_eff, mask_a),
                                         (cid_b, 1.0 - lam_eff, mask_b))))
        if len(group) % 2:
            cid = group[-1]
            full = PatchMask(cid, frozenset(range(n_patches)), n_patches)
            items.append(MixedBatchItem(uploads[cid], labels[cid], ((cid, 1.0, full),)))
        return items

    def _run_round_standalone(self, round_idx: int):
        cfg = self.config
        n_patches = self.model_config.num_patches
        total = 0.0
        for cid in range(cfg.num_clients):
            keep = MixingRatios((cfg.cutout_keep, 1.0 - cfg.cutout_keep)) \
                if cfg.cutout_keep < 1.0 else MixingRatios((1.0,))
            mask = build_patch_masks(self.root.stream(P_STANDALONE_MASK, round_idx, cid),
                                     keep, n_patches, client_ids=[cid] * len(keep.lambdas))[0]
            idx = self._sample_index(cid, round_idx)
            label = one_hot(self.dataset.labels[idx], self.dataset.classes)
            pre = self.lowers[cid].forward(self.dataset.images[idx])
            self._pending_pre[cid] = pre.patches
            clamped = clamp_smashed(pre.patches, cfg.privacy.delta_bound)
            masked = cutout(SmashedData(clamped, cid), mask)
            item = MixedBatchItem(masked, label, ((cid, 1.0, mask),))
            loss, upper_grads, cut_grads = backward_and_cut_gradients(self.uppers[cid],
                                                                      [item])
            sgd_step(self.uppers[cid].params, upper_grads, cfg.learning_rate)
            self._lower_update(cid, cut_grads[cid])
            total += loss
        return total / cfg.num_clients

    # --- metrics ------------------------------------------------------------

    def test_accuracy(self) -> float:
        accs = []
        for cid in range(self.config.num_clients):
            upper = self.uppers[cid] if self.standalone else self.upper
            accs.append(evaluate_accuracy(self.lowers[cid], upper,
                                          self.dataset.test_images,
                                          self.dataset.test_labels))
        return float(np.mean(accs))

    def training_loss_snapshot(self) -> float:
        """Mean per-sample loss of the current models over the training shards."""
        total = 0.0
        count = 0
        for cid in range(self.config.num_clients):
            upper = self.uppers[cid] if self.standalone else self.upper
            idx = self._shards[cid]
            smashed = self.lowers[cid].forward_batch(self.dataset.images[idx])
            logits = upper.forward_batch(smashed)
            upper._cache = None
            for j, i in enumerate(idx):
                total += loss_soft_ce(logits[j], one_hot(self.dataset.labels[i],
                                                         self.dataset.classes))
                count += 1
        return total / max(count, 1)

    def rdp_report(self):
        return verify_theorem1(self.config.privacy, self.config.nominal_ratios())

    def run_round(self, round_idx: int) -> dict:
        before = len(self.traffic.rows)
        if self.standalone:
            loss = self._run_round_standalone(round_idx)
        else:
            loss = self._run_round_networked(round_idx)
        delta_rows = self.traffic.rows[before:]
        up = sum(r.payload_bytes for r in delta_rows if r.direction == "up")
        down = sum(r.payload_bytes for r in delta_rows if r.direction == "down")
        if round_idx % self.config.eval_every == 0 or self._last_acc is None:
            self._last_acc = self.test_accuracy()
        report = self.rdp_report()
        p = self.config.privacy
        return {
            "round": round_idx,
            "mode": self.config.mix_mode,
            "n": self.config.num_clients,
            "g": self.config.group_size,
            "sigma_s": p.sigma_s,
            "sigma_y": p.sigma_y,
            "train_loss": loss,
            "test_acc": self._last_acc,
            "eps_o": report.eps_o,
            "eps_mix": report.eps_mix,
            "eps_cutmix": report.eps_cutmix,
            "uplink_bytes": up,
            "downlink_bytes": down,
        }

    def run(self) -> list:
        return [self.run_round(r) for r in range(self.total_rounds)]


def comm_report(log: TrafficLog, config: ExperimentConfig, num_patches: int,
                features: int) -> dict:
    """Mean per-client uplink smashed payload and the reduction vs dense upload."""
    rows = [r for r in log.rows if r.kind == SMASHED_UP]
    dense = sparse_payload_bytes(num_patches, features)
    if not rows:
        return {"mean_uplink_smashed_bytes": 0.0, "dense_reference_bytes": dense,
                "reduction_factor": 1.0}
    per_msg = [r.payload_bytes for r in rows]
    mean_bytes = float(np.mean(per_msg))
    return {
        "mean_uplink_smashed_bytes": mean_bytes,
        "dense_reference_bytes": dense,
        "reduction_factor": dense / mean_bytes,
    }
