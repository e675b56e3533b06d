"""The desk-scale detector: an MLP backbone producing a small spatial
feature map, the inductive head on top, and linear classification /
box-offset heads, with class prototypes riding along.

Regions arrive as fixed feature vectors (the stream generator plays the
role of a region-proposal stage), so a forward pass maps (B, feature_dim)
to a feature map for distillation, an embedding for clustering, class
logits, masked probabilities, and box-corner offsets relative to the
region anchor. All parameters live in one flat name->array dict so the
optimizer, freeze sets, and snapshots speak the same language.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from owlab.distill import Prototypes, TeacherSnapshot
from owlab.inductive import IfcBlock, ifc_backward, ifc_forward
from owlab.numcore import (
    MlpParams,
    as_array,
    masked_softmax,
    mlp_backward,
    mlp_forward,
)


@dataclass
class DetectorConfig:
    """Architecture knobs. The feature map is fmap_channels x fmap_h x
    fmap_w; the flattened map feeds the inductive head, whose width is the
    embedding size. ifc_enabled=False pins the head's square layers at the
    exact identity forever (they then belong to no update set)."""

    feature_dim: int
    n_classes: int
    backbone_hidden: tuple = (32,)
    fmap_channels: int = 8
    fmap_h: int = 2
    fmap_w: int = 2
    ifc_width: int = 32
    ifc_enabled: bool = True
    proto_rate: float = 0.1
    identity_noise: float = 1e-3

    def __post_init__(self):
        if self.feature_dim < 1 or self.n_classes < 1:
            raise ValueError("feature_dim and n_classes must be >= 1")
        if self.fmap_channels < 1 or self.fmap_h < 1 or self.fmap_w < 1:
            raise ValueError("feature map dims must be >= 1")
        if self.ifc_width < 1:
            raise ValueError("ifc_width must be >= 1")
        if not 0 < self.proto_rate <= 1:
            raise ValueError("proto_rate must lie in (0, 1]")
        if self.identity_noise < 0:
            raise ValueError("identity_noise must be >= 0")

    @property
    def fmap_size(self):
        return self.fmap_channels * self.fmap_h * self.fmap_w

    def to_dict(self):
        d = self.__dict__.copy()
        d["backbone_hidden"] = list(self.backbone_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone_hidden"] = tuple(d["backbone_hidden"])
        return cls(**d)


@dataclass
class DetectorOutput:
    fmaps: np.ndarray        # (B, C, H, W)
    embeddings: np.ndarray   # (B, E)
    logits: np.ndarray       # (B, K)
    probs: np.ndarray        # (B, K), masked softmax
    box_offsets: np.ndarray  # (B, 4)


class Detector:
    """Backbone + inductive head + linear class/box heads over a flat
    parameter dict."""

    def __init__(self, config, params, protos):
        self.config = config
        self.params = params
        self.protos = protos

    @classmethod
    def create(cls, config, seed):
        bb_dims = [config.feature_dim, *config.backbone_hidden,
                   config.fmap_size]
        backbone = MlpParams.create(bb_dims, np.random.default_rng([seed, 10]))
        noise = config.identity_noise if config.ifc_enabled else 0.0
        ifc = IfcBlock.create(config.fmap_size, config.ifc_width,
                              np.random.default_rng([seed, 11]),
                              identity_noise=noise)
        cls_head = MlpParams.create([config.ifc_width, config.n_classes],
                                    np.random.default_rng([seed, 12]))
        reg_head = MlpParams.create([config.ifc_width, 4],
                                    np.random.default_rng([seed, 13]))
        params = {}
        for i, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
            params[f"backbone.w{i}"] = w
            params[f"backbone.b{i}"] = b
        for name, value in ifc.params.items():
            params[f"ifc.{name}"] = value
        params["cls.w"] = cls_head.weights[0]
        params["cls.b"] = cls_head.biases[0]
        params["reg.w"] = reg_head.weights[0]
        params["reg.b"] = reg_head.biases[0]
        protos = Prototypes.create(config.n_classes, config.ifc_width,
                                   rate=config.proto_rate)
        return cls(config=config, params=params, protos=protos)

    # -- parameter bookkeeping ------------------------------------------

    def _n_backbone_layers(self):
        return len(self.config.backbone_hidden) + 1

    def backbone_view(self):
        n = self._n_backbone_layers()
        return MlpParams(
            weights=[self.params[f"backbone.w{i}"] for i in range(n)],
            biases=[self.params[f"backbone.b{i}"] for i in range(n)])

    def ifc_view(self):
        return IfcBlock(params={name: self.params[f"ifc.{name}"]
                                for name in IfcBlock.task_param_names()
                                + IfcBlock.inductive_param_names()})

    def head_view(self, which):
        return MlpParams(weights=[self.params[f"{which}.w"]],
                         biases=[self.params[f"{which}.b"]])

    def task_param_names(self):
        names = [n for n in self.params if not n.startswith("ifc.ind")]
        return sorted(names)

    def inductive_param_names(self):
        if not self.config.ifc_enabled:
            return []
        return sorted(n for n in self.params if n.startswith("ifc.ind"))

    def frozen_forever_names(self):
        """Names in no update set (the identity layers of a disabled head)."""
        if self.config.ifc_enabled:
            return []
        return sorted(n for n in self.params if n.startswith("ifc.ind"))

    # -- forward / backward ---------------------------------------------

    def forward(self, features, seen_mask):
        x = as_array(features)
        if x.ndim == 1:
            x = x[None, :]
        b = x.shape[0]
        cfg = self.config
        flat, bb_cache = mlp_forward(self.backbone_view(), x)
        embed, ifc_cache = ifc_forward(self.ifc_view(), flat)
        logits, cls_cache = mlp_forward(self.head_view("cls"), embed)
        probs = masked_softmax(logits, seen_mask)
        offsets, reg_cache = mlp_forward(self.head_view("reg"), embed)
        out = DetectorOutput(
            fmaps=flat.reshape(b, cfg.fmap_channels, cfg.fmap_h, cfg.fmap_w),
            embeddings=embed, logits=logits, probs=probs, box_offsets=offsets)
        cache = (bb_cache, ifc_cache, cls_cache, reg_cache)
        return out, cache

    def backward(self, cache, dlogits=None, dboxes=None, dembed=None,
                 dfmaps=None):
        """Accumulate gradients for any mix of output sensitivities.

        dlogits/dboxes/dembed/dfmaps may each be None; returns a flat
        name->gradient dict covering every parameter (zeros where nothing
        flowed).
        """
        bb_cache, ifc_cache, cls_cache, reg_cache = cache
        grads = {name: np.zeros_like(v) for name, v in self.params.items()}
        b = bb_cache[0][0].shape[0]  # batch size from the cached input
        g_embed = np.zeros((b, self.config.ifc_width))
        if dlogits is not None:
            gw, gb, gx = mlp_backward(self.head_view("cls"), cls_cache,
                                      dlogits)
            grads["cls.w"] += gw[0]
            grads["cls.b"] += gb[0]
            g_embed += gx
        if dboxes is not None:
            gw, gb, gx = mlp_backward(self.head_view("reg"), reg_cache,
                                      dboxes)
            grads["reg.w"] += gw[0]
            grads["reg.b"] += gb[0]
            g_embed += gx
        if dembed is not None:
            g_embed += as_array(dembed)
        ifc_grads, dflat = ifc_backward(self.ifc_view(), ifc_cache, g_embed)
        for name, g in ifc_grads.items():
            grads[f"ifc.{name}"] += g
        if dfmaps is not None:
            dflat = dflat + as_array(dfmaps).reshape(b, -1)
        gw, gb, _ = mlp_backward(self.backbone_view(), bb_cache, dflat)
        for i in range(self._n_backbone_layers()):
            grads[f"backbone.w{i}"] += gw[i]
            grads[f"backbone.b{i}"] += gb[i]
        return grads

    # -- snapshots and persistence --------------------------------------

    def snapshot(self):
        return TeacherSnapshot(self.params)

    def forward_with_params(self, params, features, seen_mask):
        """Forward pass through an alternative parameter set (a teacher
        snapshot), leaving self.params untouched."""
        borrowed = Detector(config=self.config, params=dict(params),
                            protos=self.protos)
        out, _ = borrowed.forward(features, seen_mask)
        return out


def save_checkpoint(path, detector, meta=None):
    """JSON checkpoint: config, parameters with shapes, prototypes, meta."""
    payload = {
        "detector_config": detector.config.to_dict(),
        "meta": dict(meta or {}),
        "params": {
            name: {"shape": list(v.shape),
                   "data": [float(x) for x in np.ravel(v)]}
            for name, v in sorted(detector.params.items())},
        "prototypes": {
            "values": [[float(x) for x in row]
                       for row in detector.protos.values],
            "active": [bool(a) for a in detector.protos.active],
            "rate": detector.protos.rate,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Inverse of save_checkpoint. Returns (detector, meta)."""
    with open(path) as fh:
        payload = json.load(fh)
    config = DetectorConfig.from_dict(payload["detector_config"])
    params = {}
    for name, rec in payload["params"].items():
        params[name] = as_array(rec["data"]).reshape(rec["shape"])
    pr = payload["prototypes"]
    protos = Prototypes(values=as_array(pr["values"]),
                        active=np.asarray(pr["active"], dtype=bool),
                        rate=float(pr["rate"]))
    return Detector(config=config, params=params, protos=protos), \
        payload["meta"]
