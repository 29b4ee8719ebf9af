"""Declarative architecture builders and the composed model graph.

An ArchitectureSpec lists encoder modalities, decoder wiring (query stream,
key/value streams, output stream), classifier inputs, and enabled loss
heads.  Streams are referenced by name; a decoder output's positions follow
its query stream, so every stream has a base modality lineage used for
attention-trace bookkeeping.

Builders cover: per-modality encoders with a concatenated classifier
(enc-concat), two-modality directional cross-attention probes (xprobe), and
the three explanation-guided models (egm0/egm1/egm2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    AttentionTrace,
    BlockConfig,
    ClassifierHead,
    Decoder,
    Encoder,
    MlmHead,
    ParamStore,
    TraceEntry,
    cls_vector,
    mask_for_mlm,
)
from .errors import ConfigError, InferenceError
from .tensor import Tensor
from .vocab import DEFAULT_MAX_LEN, MODALITIES, tokenize

ARCH_IDS = ("enc-concat", "xprobe", "egm0", "egm1", "egm2")
LOSS_HEADS = ("BINDER", "MLM_ENC", "MLM_DEC", "MHC_CLASS", "MHC_ALLELE", "TRVJ")
BINDER_CLASS = 1  # index of the "binder" logit


@dataclass
class WiringEntry:
    query: str
    keys: list
    output: str

    def to_dict(self):
        return {"query": self.query, "keys": list(self.keys),
                "output": self.output}


@dataclass
class ArchitectureSpec:
    arch_id: str
    modalities: list
    wiring: list = field(default_factory=list)
    classifier_inputs: list = field(default_factory=list)
    loss_heads: list = field(default_factory=lambda: ["BINDER"])
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ConfigError(f"unknown arch_id {self.arch_id!r}")
        if not self.modalities:
            raise ConfigError("modalities must be non-empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modalities")
        streams = set(self.modalities)
        for entry in self.wiring:
            if entry.query not in streams:
                raise ConfigError(
                    f"wiring output {entry.output!r}: unknown query "
                    f"{entry.query!r}")
            for k in entry.keys:
                if k not in streams:
                    raise ConfigError(
                        f"wiring output {entry.output!r}: unknown key {k!r}")
            if entry.output in streams:
                raise ConfigError(f"duplicate stream name {entry.output!r}")
            streams.add(entry.output)
        if not self.classifier_inputs:
            raise ConfigError("classifier_inputs must be non-empty")
        for name in self.classifier_inputs:
            if name not in streams:
                raise ConfigError(f"classifier input {name!r} is not a stream")
        if "BINDER" not in self.loss_heads:
            raise ConfigError("BINDER loss head is mandatory")
        for head in self.loss_heads:
            if head not in LOSS_HEADS:
                raise ConfigError(f"unknown loss head {head!r}")

    def stream_base(self):
        """Base modality lineage per stream (decoder outputs follow their
        query stream's positions)."""
        base = {m: m for m in self.modalities}
        for entry in self.wiring:
            base[entry.output] = base[entry.query]
        return base

    def directions(self):
        """(query base, key base) pairs the architecture can explain."""
        base = self.stream_base()
        out = set()
        for entry in self.wiring:
            for k in entry.keys:
                out.add((base[entry.query], base[k]))
        return sorted(out)

    def to_dict(self):
        return {
            "arch_id": self.arch_id,
            "modalities": list(self.modalities),
            "wiring": [w.to_dict() for w in self.wiring],
            "classifier_inputs": list(self.classifier_inputs),
            "loss_heads": list(self.loss_heads),
            "options": dict(self.options),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        try:
            wiring = [WiringEntry(w["query"], list(w["keys"]), w["output"])
                      for w in d.get("wiring", [])]
            return cls(arch_id=d["arch_id"], modalities=list(d["modalities"]),
                       wiring=wiring,
                       classifier_inputs=list(d["classifier_inputs"]),
                       loss_heads=list(d["loss_heads"]),
                       options=dict(d.get("options", {})))
        except KeyError as exc:
            raise ConfigError(f"architecture spec missing field {exc}") from exc

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# builders

def build_enc_concat_spec(modalities):
    return ArchitectureSpec(
        arch_id="enc-concat",
        modalities=list(modalities),
        classifier_inputs=list(modalities),
        loss_heads=["BINDER", "MLM_ENC"],
    )


def build_xprobe_spec(direction, extra_features="NONE",
                      a="EPITOPE", b="CDR3B"):
    """Two-modality directional probes; a->b means a queries b."""
    if direction not in ("A_TO_B", "B_TO_A", "BIDIR"):
        raise ConfigError(f"unknown direction {direction!r}")
    if extra_features not in ("NONE", "QUERY", "ATTENDED"):
        raise ConfigError(f"unknown extra_features {extra_features!r}")
    if direction == "BIDIR" and extra_features != "NONE":
        raise ConfigError("BIDIR probe takes no extra features")
    wiring, classifier = [], []
    if direction in ("A_TO_B", "BIDIR"):
        wiring.append(WiringEntry(query=a, keys=[b], output="XA2B"))
        classifier.append("XA2B")
    if direction in ("B_TO_A", "BIDIR"):
        wiring.append(WiringEntry(query=b, keys=[a], output="XB2A"))
        classifier.append("XB2A")
    if extra_features == "QUERY":
        classifier.append(a if direction == "A_TO_B" else b)
    elif extra_features == "ATTENDED":
        classifier.append(b if direction == "A_TO_B" else a)
    return ArchitectureSpec(
        arch_id="xprobe",
        modalities=[a, b],
        wiring=wiring,
        classifier_inputs=classifier,
        loss_heads=["BINDER"],
        options={"direction": direction, "extra_features": extra_features},
    )


def build_egm0_spec():
    wiring = [
        WiringEntry("EPITOPE", ["TCR_A", "TCR_B"], "EPI_X"),
        WiringEntry("TCR_A", ["EPITOPE", "TCR_B"], "A_X"),
        WiringEntry("TCR_B", ["EPITOPE", "TCR_A"], "B_X"),
    ]
    return ArchitectureSpec(
        arch_id="egm0",
        modalities=["TCR_A", "TCR_B", "EPITOPE"],
        wiring=wiring,
        classifier_inputs=["EPI_X", "A_X", "B_X"],
        loss_heads=["BINDER", "MLM_ENC"],
    )


def _egm_chain_wiring(epitope_queries, enrich_final):
    if epitope_queries not in ("enriched", "raw"):
        raise ConfigError(
            f"epitope_queries must be enriched|raw, got {epitope_queries!r}")
    epi_a_key = "A_PRIME" if epitope_queries == "enriched" else "TCR_A"
    epi_b_key = "B_PRIME" if epitope_queries == "enriched" else "TCR_B"
    d5_keys = ["EPITOPE", "B_PRIME"] if enrich_final else ["EPITOPE"]
    d6_keys = ["EPITOPE", "A_PRIME"] if enrich_final else ["EPITOPE"]
    return [
        WiringEntry("TCR_A", ["TCR_B"], "A_PRIME"),
        WiringEntry("TCR_B", ["TCR_A"], "B_PRIME"),
        WiringEntry("EPITOPE", [epi_a_key], "EPI_A"),
        WiringEntry("EPITOPE", [epi_b_key], "EPI_B"),
        WiringEntry("A_PRIME", d5_keys, "A_OUT"),
        WiringEntry("B_PRIME", d6_keys, "B_OUT"),
    ]


def build_egm1_spec(epitope_queries="enriched"):
    return ArchitectureSpec(
        arch_id="egm1",
        modalities=["TCR_A", "TCR_B", "EPITOPE"],
        wiring=_egm_chain_wiring(epitope_queries, enrich_final=False),
        classifier_inputs=["EPI_A", "EPI_B", "A_OUT", "B_OUT"],
        loss_heads=["BINDER", "MLM_ENC"],
        options={"epitope_queries": epitope_queries},
    )


def build_egm2_spec(epitope_queries="enriched"):
    return ArchitectureSpec(
        arch_id="egm2",
        modalities=["TCR_A", "TCR_B", "EPITOPE"],
        wiring=_egm_chain_wiring(epitope_queries, enrich_final=True),
        classifier_inputs=["EPI_A", "EPI_B", "A_OUT", "B_OUT"],
        loss_heads=["BINDER", "MLM_ENC"],
        options={"epitope_queries": epitope_queries},
    )


SPEC_BUILDERS = {
    "enc-concat": build_enc_concat_spec,
    "xprobe": build_xprobe_spec,
    "egm0": build_egm0_spec,
    "egm1": build_egm1_spec,
    "egm2": build_egm2_spec,
}

# chains eligible to host each allele classification head
_TRVJ_PATHWAY = {
    "va": ("TCR_A", "CDR3A", "CDR2A", "CDR1A"),
    "ja": ("TCR_A", "CDR3A", "CDR2A", "CDR1A"),
    "vb": ("TCR_B", "CDR3B", "CDR2B", "CDR1B"),
    "jb": ("TCR_B", "CDR3B", "CDR2B", "CDR1B"),
}


@dataclass
class ForwardOutput:
    binder_logits: Tensor
    p_bind: np.ndarray
    streams: dict                  # name -> (states Tensor, mask [B,L], base)
    mlm_logits: dict               # stream -> Tensor [B, L, vocab]
    aux_logits: dict               # "mhc_class"|"mhc_allele"|"va".. -> Tensor
    trace: AttentionTrace


class ModelGraph:
    """Composed encoders, decoders, and heads for one ArchitectureSpec."""

    def __init__(self, spec, config, max_lens=None, seed=0, aux_sizes=None):
        self.spec = spec
        self.config = config
        self.max_lens = dict(max_lens or
                             {m: DEFAULT_MAX_LEN[m] for m in spec.modalities})
        for m in spec.modalities:
            if m not in self.max_lens:
                raise ConfigError(f"max_lens missing modality {m!r}")
        self.aux_sizes = dict(aux_sizes or {})
        self.store = ParamStore()
        self._base = spec.stream_base()
        rng = np.random.default_rng(seed)

        self.encoders = {
            m: Encoder(self.store, f"enc.{m}", config, self.max_lens[m], rng)
            for m in spec.modalities
        }
        self.decoders = {
            entry.output: Decoder(self.store, f"dec.{entry.output}", config, rng)
            for entry in spec.wiring
        }
        self.mlm_heads = {}
        if "MLM_ENC" in spec.loss_heads:
            for m in spec.modalities:
                self.mlm_heads[m] = MlmHead(self.store, f"mlm.{m}",
                                            config.hidden, rng)
        if "MLM_DEC" in spec.loss_heads:
            # decoder MLM heads read the decoder's query-side outputs
            for entry in spec.wiring:
                self.mlm_heads[entry.output] = MlmHead(
                    self.store, f"mlm.{entry.output}", config.hidden, rng)
        self.classifier = ClassifierHead(
            self.store, "cls", config.hidden,
            n_sources=len(spec.classifier_inputs), n_classes=2, rng=rng)
        self.aux_heads = {}
        if "MHC_CLASS" in spec.loss_heads:
            self.aux_heads["mhc_class"] = ClassifierHead(
                self.store, "aux.mhc_class", config.hidden, 1, 2, rng)
        if "MHC_ALLELE" in spec.loss_heads:
            n = self._aux_size("mhc_allele")
            self.aux_heads["mhc_allele"] = ClassifierHead(
                self.store, "aux.mhc_allele", config.hidden, 1, n, rng)
        if "TRVJ" in spec.loss_heads:
            for fieldname in ("va", "ja", "vb", "jb"):
                if self._trvj_stream(fieldname) is None:
                    continue
                n = self._aux_size(fieldname)
                self.aux_heads[fieldname] = ClassifierHead(
                    self.store, f"aux.{fieldname}", config.hidden, 1, n, rng)

    def _aux_size(self, name):
        n = self.aux_sizes.get(name)
        if not n or n < 2:
            raise ConfigError(
                f"loss head needs aux_sizes[{name!r}] >= 2 (label space size)")
        return n

    def _pathway_stream(self, base_modality):
        """Last wiring output rooted at the modality, else its encoder."""
        stream = base_modality if base_modality in self.spec.modalities else None
        for entry in self.spec.wiring:
            if self._base[entry.output] == base_modality:
                stream = entry.output
        return stream

    def _trvj_stream(self, fieldname):
        for mod in _TRVJ_PATHWAY[fieldname]:
            stream = self._pathway_stream(mod)
            if stream is not None:
                return stream
        return None

    def named_parameters(self):
        return self.store.named()

    def parameter_count(self):
        return self.store.n_values()

    def available_directions(self):
        return self.spec.directions()

    def forward(self, batch, rng=None, training=False, capture=False):
        """Run the graph.  ``batch`` maps "ids"/"mask" -> modality -> [B, L]
        arrays.  Returns a ForwardOutput; the trace is populated only when
        ``capture`` is true."""
        ids, masks = batch["ids"], batch["mask"]
        for m in self.spec.modalities:
            if m not in ids or m not in masks:
                raise InferenceError(f"batch is missing modality {m!r}")
        if training and rng is None:
            raise ConfigError("training forward needs an rng for dropout")
        trace = AttentionTrace() if capture else None
        streams = {}

        for m in self.spec.modalities:
            sink = self._encoder_sink(trace, m, masks[m]) if capture else None
            states = self.encoders[m](ids[m], masks[m], rng, training,
                                      capture=sink)
            streams[m] = (states, masks[m], m)

        for entry in self.spec.wiring:
            q_states, q_mask, q_base = streams[entry.query]
            parts = [streams[k] for k in entry.keys]
            if len(parts) == 1:
                kv_states, kv_mask = parts[0][0], parts[0][1]
            else:
                kv_states = T.concat([p[0] for p in parts], axis=1)
                kv_mask = np.concatenate([p[1] for p in parts], axis=1)
            spans, offset = [], 0
            for key_name, part in zip(entry.keys, parts):
                length = part[1].shape[1]
                spans.append((key_name, self._base[key_name],
                              offset, offset + length))
                offset += length
            sink_self = sink_cross = None
            if capture:
                sink_self = self._decoder_self_sink(trace, entry, q_mask)
                sink_cross = self._decoder_cross_sink(trace, entry, tuple(spans),
                                                      q_mask, kv_mask)
            out = self.decoders[entry.output](
                q_states, q_mask, kv_states, kv_mask, rng, training,
                capture_self=sink_self, capture_cross=sink_cross)
            streams[entry.output] = (out, q_mask, q_base)

        cls_vecs = [cls_vector(streams[name][0])
                    for name in self.spec.classifier_inputs]
        binder_logits = self.classifier(cls_vecs)
        p = _softmax_rows(binder_logits.data)[:, BINDER_CLASS]

        mlm_logits = {name: head(streams[name][0])
                      for name, head in self.mlm_heads.items()}

        aux_logits = {}
        for name, head in self.aux_heads.items():
            if name in ("mhc_class", "mhc_allele"):
                stream = self._pathway_stream("EPITOPE")
            else:
                stream = self._trvj_stream(name)
            aux_logits[name] = head([cls_vector(streams[stream][0])])

        return ForwardOutput(binder_logits=binder_logits, p_bind=p,
                             streams=streams, mlm_logits=mlm_logits,
                             aux_logits=aux_logits, trace=trace)

    def _encoder_sink(self, trace, modality, mask):
        length = mask.shape[1]
        spans = ((modality, modality, 0, length),)

        def sink(layer, head, probs):
            trace.record(TraceEntry(
                query_stream=modality, query_base=modality,
                key_streams=(modality,), layer=layer, head=head,
                weights=probs, key_spans=spans,
                query_mask=mask, key_mask=mask))
        return sink

    def _decoder_self_sink(self, trace, entry, q_mask):
        base = self._base[entry.output]
        length = q_mask.shape[1]
        spans = ((entry.output, base, 0, length),)

        def sink(layer, head, probs):
            trace.record(TraceEntry(
                query_stream=entry.output, query_base=base,
                key_streams=(entry.output,), layer=layer, head=head,
                weights=probs, key_spans=spans,
                query_mask=q_mask, key_mask=q_mask))
        return sink

    def _decoder_cross_sink(self, trace, entry, spans, q_mask, kv_mask):
        base = self._base[entry.output]

        def sink(layer, head, probs):
            trace.record(TraceEntry(
                query_stream=entry.output, query_base=base,
                key_streams=tuple(entry.keys), layer=layer, head=head,
                weights=probs, key_spans=spans,
                query_mask=q_mask, key_mask=kv_mask))
        return sink

    # -- persistence --------------------------------------------------------

    def export_arrays(self):
        return self.store.export_arrays()

    def load_arrays(self, arrays):
        self.store.load_arrays(arrays)

    def manifest_stub(self):
        return {
            "architecture": self.spec.to_dict(),
            "block_config": {
                "layers": self.config.layers,
                "hidden": self.config.hidden,
                "heads": self.config.heads,
                "ffn_mult": self.config.ffn_mult,
                "dropout": self.config.dropout,
                "cross_residual": self.config.cross_residual,
            },
            "max_lens": dict(self.max_lens),
            "aux_sizes": dict(self.aux_sizes),
            "mlm_head_source": "decoder_output",
        }


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def model_from_manifest(manifest, seed=0):
    spec = ArchitectureSpec.from_dict(manifest["architecture"])
    bc = manifest["block_config"]
    config = BlockConfig(layers=bc["layers"], hidden=bc["hidden"],
                         heads=bc["heads"], ffn_mult=bc["ffn_mult"],
                         dropout=bc["dropout"],
                         cross_residual=bc["cross_residual"])
    return ModelGraph(spec, config, max_lens=manifest["max_lens"], seed=seed,
                      aux_sizes=manifest.get("aux_sizes") or None)


# ---------------------------------------------------------------------------
# batching

def tokenize_records(records, modalities, max_lens, counters=None):
    """Stack per-record tokenizations into model-ready batch arrays."""
    ids = {m: [] for m in modalities}
    mask = {m: [] for m in modalities}
    for rec in records:
        for m in modalities:
            tm = tokenize(rec.sequence(m), m, max_lens[m], counters=counters)
            ids[m].append(tm.ids)
            mask[m].append(tm.attn_mask)
    return {
        "ids": {m: np.stack(v) for m, v in ids.items()},
        "mask": {m: np.stack(v) for m, v in mask.items()},
    }


def slice_batch(batch, idx):
    """Row subset of a tokenized batch; ``idx`` indexes records."""
    return {
        "ids": {m: v[idx] for m, v in batch["ids"].items()},
        "mask": {m: v[idx] for m, v in batch["mask"].items()},
    }


def fit_max_lens(records, modalities, cap=None):
    """Smallest per-modality max_len covering the records (+1 for [CLS]),
    optionally capped by the schema defaults."""
    out = {}
    for m in modalities:
        longest = max((len(r.sequence(m)) for r in records), default=0)
        length = max(2, longest + 1)
        if cap is not None:
            length = min(length, cap.get(m, length))
        out[m] = length
    return out


def corrupt_batch(batch, mask_prob, rng):
    """Apply MLM corruption to every modality; returns (batch, labels)."""
    new_ids, labels = {}, {}
    for m in sorted(batch["ids"]):
        corrupted, lab = mask_for_mlm(batch["ids"][m], batch["mask"][m],
                                      mask_prob, rng)
        new_ids[m] = corrupted
        labels[m] = lab
    return {"ids": new_ids, "mask": batch["mask"]}, labels
