"""Command-line entry point.

Exit status: 0 success, 1 runtime error, 2 usage or config error.

Run configs are flat ``key = value`` files; ``#`` or ``;`` start comments.
Recognised keys (defaults in parentheses)::

    model.dense_layers, model.rre_layers, model.heads, model.hidden,
    model.ffn, model.vocab                                  (required)
    model.num_domains (1)   model.experts_per_domain (1)
    model.embedding_slots (1)   model.max_seq_len (64)
    model.code_domains (empty; comma list)   model.init_seed (0)
    model.routing_seed (0)
    adam.beta1 (0.8)  adam.beta2 (0.95)  adam.eps_dense (1e-8)
    adam.eps_rre (1e-20)  adam.peak_lr (1e-3)  adam.end_lr (2e-5)
    adam.warmup_steps (5000)  adam.decay_steps (180000)
    train.steps (100)  train.batch_size (16)  train.seed (0)
    train.mask_pad (true)  train.stages (one stage over all domains;
        "start:end:d0,d1; start:end:...")
    data.dir, out.checkpoint                                (optional)
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data, routing, sim
from .model import ConfigError, ModelConfig, forward, init_model, lm_split, load_checkpoint, loss, save_checkpoint
from .optim import AdamConfig, ScheduleError, StageSchedule, grad_check, train, write_trace_csv
from .surgery import Vocab, extract_submodel, inherit_model, merge_vocab


@dataclass
class RunConfig:
    model: ModelConfig
    adam: AdamConfig
    schedule: StageSchedule | None
    steps: int = 100
    batch_size: int = 16
    seed: int = 0
    mask_pad: bool = True
    data_dir: str | None = None
    out: str | None = None

    @property
    def pad_id(self) -> int | None:
        return data.SpecialTokens.reserve(self.model.vocab).pad if self.mask_pad else None


_MODEL_REQUIRED = ("dense_layers", "rre_layers", "heads", "hidden", "ffn", "vocab")


def _convert(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None


def _parse_stages(key: str, raw: str) -> StageSchedule:
    lines = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ConfigError(f"config key {key!r}: stage {chunk!r} is not start:end:domains")
        lines.append(" ".join(parts))
    try:
        return StageSchedule.parse("\n".join(lines))
    except ScheduleError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                   interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    items = dict(cp["run"])

    model_types = {f.name: f.type for f in fields(ModelConfig)}
    adam_types = {f.name: f.type for f in fields(AdamConfig)}
    model_kw, adam_kw, run_kw = {}, {}, {}
    schedule = None
    for key, raw in items.items():
        section, _, name = key.partition(".")
        if section == "model" and name in model_types and name != "slot_map":
            kind = "ints" if name == "code_domains" else (float if "float" in model_types[name] else int)
            model_kw[name] = _convert(key, raw, kind)
        elif section == "adam" and name in adam_types:
            adam_kw[name] = _convert(key, raw, int if "int" in adam_types[name] else float)
        elif key == "train.stages":
            schedule = _parse_stages(key, raw)
        elif key in ("train.steps", "train.batch_size", "train.seed"):
            run_kw[name] = _convert(key, raw, int)
        elif key == "train.mask_pad":
            run_kw["mask_pad"] = _convert(key, raw, bool)
        elif key == "data.dir":
            run_kw["data_dir"] = raw
        elif key == "out.checkpoint":
            run_kw["out"] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for name in _MODEL_REQUIRED:
        if name not in model_kw:
            raise ConfigError(f"missing required config key 'model.{name}'")
    model = ModelConfig(**model_kw)
    adam = AdamConfig(**adam_kw)
    try:
        model.validate()
    except ConfigError as exc:
        raise ConfigError(f"config section 'model': {exc}") from None
    try:
        adam.validate()
    except ValueError as exc:
        raise ConfigError(f"config section 'adam': {exc}") from None
    return RunConfig(model, adam, schedule, **run_kw)


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


# --- verbs -----------------------------------------------------------------------

def _cmd_rre_table(a):
    spec = routing.RoutingSpec(a.domains, a.layers, a.experts, a.vocab, a.seed)
    routing.write_table(a.out, routing.build_routing_table(spec))


def _cmd_rre_route(a):
    table = routing.read_table(a.table)
    print(routing.route(table, a.domain, a.layer, a.token))


def _read_docs(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                yield int(rec["domain"]), rec["tokens"]


def _cmd_data_format(a):
    specials = data.SpecialTokens.reserve(a.vocab)
    if a.vocab - 6 < data.BYTE_VOCAB:
        raise ConfigError("--vocab must leave room for 256 byte IDs plus 6 specials (>= 262)")
    with open(a.input, encoding="utf-8") as src, open(a.out, "w", encoding="utf-8") as dst:
        for line in src:
            line = line.rstrip("\n")
            if not line:
                continue
            doc = data.CorpusDoc(a.domain, data.encode_bytes(line), a.subtag, a.kind)
            dst.write(json.dumps({"domain": a.domain, "tokens": data.format_doc(doc, specials)}) + "\n")


def _cmd_data_pack(a):
    streams: dict[int, list] = {}
    for path in a.input:
        for dom, toks in _read_docs(path):
            streams.setdefault(dom, []).append(toks)
    instances = []
    for dom, seqs in streams.items():
        instances += list(data.pack_tokens(seqs, a.len, dom))
    data.write_instances(a.out, instances, a.len, a.domains)
    print(f"{len(instances)} instances of length {a.len}")


def _cmd_data_pad(a):
    specials = data.SpecialTokens.reserve(a.vocab)
    instances = [data.pad_or_truncate(toks, a.len, specials, dom)
                 for path in a.input for dom, toks in _read_docs(path)]
    data.write_instances(a.out, instances, a.len, a.domains)
    print(f"{len(instances)} instances of length {a.len}")


def _cmd_data_stats(a):
    head = data.read_header(a.input)
    instances = data.read_instances(a.input)
    pad = data.SpecialTokens.reserve(a.vocab).pad if a.vocab else None
    stats = data.instance_stats(instances, pad)
    print(f"seq_len {head['seq_len']}")
    print(f"domains {head['num_domains']}")
    for k, v in stats.items():
        print(f"{k} {v}")


def _cmd_data_synth(a):
    specials = data.SpecialTokens.reserve(a.vocab)
    if a.base_vocab > a.vocab - 6:
        raise ConfigError("--base-vocab overlaps the special tokens")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = data.synthetic_corpus(a.domains, a.docs, a.base_vocab, a.seed)
    for dom, docs in corpus.items():
        instances = data.pack_pretrain(docs, a.len, specials)
        data.write_instances(out / f"domain{dom}.pgsi", instances, a.len, a.domains)
        print(f"domain {dom}: {len(instances)} instances")


def _load_instances(path) -> list:
    path = Path(path)
    files = sorted(path.glob("*.pgsi")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .pgsi files under {path}")
    out = []
    for f in files:
        out += data.read_instances(f)
    return out


def _cmd_train(a):
    cfg = parse_config(a.config)
    data_dir = a.data or cfg.data_dir
    out = a.out or cfg.out
    if data_dir is None or out is None:
        raise ConfigError("train needs --data/--out or data.dir/out.checkpoint in the config")
    steps = a.steps if a.steps is not None else cfg.steps
    schedule = cfg.schedule
    if a.stage_schedule:
        schedule = StageSchedule.parse(Path(a.stage_schedule).read_text())
    if schedule is None:
        schedule = StageSchedule.single(range(cfg.model.num_domains), steps)
    instances = _load_instances(data_dir)
    model = init_model(cfg.model)
    result = train(model, instances, cfg.adam, schedule, steps, cfg.batch_size, cfg.seed, cfg.pad_id)
    save_checkpoint(model, out)
    csv_path = a.loss_csv or Path(out) / "loss.csv"
    write_trace_csv(csv_path, result.trace)
    print(f"loss {result.trace[0]['loss']:.4f} -> {result.trace[-1]['loss']:.4f} over {steps} steps")


def _cmd_eval(a):
    model = load_checkpoint(a.model)
    pad = data.SpecialTokens.reserve(model.config.vocab).pad if not a.no_mask_pad else None
    by_domain: dict[int, list] = {}
    for inst in _load_instances(a.data):
        by_domain.setdefault(inst.domain_id, []).append(inst.token_ids)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["domain", "instances", "loss"])
    for dom in sorted(by_domain):
        toks = np.stack(by_domain[dom])
        inputs, targets, mask = lm_split(toks, pad)
        value = loss(forward(model, inputs, [dom] * len(toks)), targets, mask)
        w.writerow([dom, len(toks), repr(value)])


def _cmd_init(a):
    cfg = parse_config(a.config)
    save_checkpoint(init_model(cfg.model), a.out)


def _cmd_inherit(a):
    donor = load_checkpoint(a.donor)
    cfg = parse_config(a.config)
    donor_vocab = Vocab.from_file(a.donor_vocab) if a.donor_vocab else None
    merged = None
    if a.add_vocab:
        base = donor_vocab or Vocab(str(i) for i in range(donor.config.vocab))
        donor_vocab = base
        merged = merge_vocab(base, Vocab.from_file(a.add_vocab))
    model = inherit_model(donor, cfg.model, donor_vocab, merged, a.seed)
    save_checkpoint(model, a.out)


def _cmd_extract(a):
    save_checkpoint(extract_submodel(load_checkpoint(a.model), a.domain), a.out)


def _cmd_commsim_volume(a):
    domains = a.domains or a.groups
    experts = a.experts or max(1, a.devices // a.groups)
    cluster = sim.ClusterSpec(a.devices, a.groups, a.hidden, a.element_bytes)
    placement = sim.place_experts(cluster, domains, experts)
    if a.hist:
        hist = np.loadtxt(a.hist, ndmin=1)
    else:
        hist = np.full(domains, a.tokens // domains)
        hist[: a.tokens % domains] += 1
    methods = ["analytic", "simulate"] if a.method == "both" else [a.method]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "bytes_global", "bytes_grouped", "ratio"])
    for method in methods:
        r = sim.all_to_all_volume(cluster, placement, hist, a.mode, method, a.seed)
        w.writerow([method, r.bytes_global, r.bytes_grouped, r.ratio])


def _cmd_commsim_upload(a):
    sizes = np.loadtxt(a.shards, ndmin=1).tolist()
    plan = sim.round_robin_upload(sizes, a.bandwidth, a.limit)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["shard", "slot", "start", "end"])
    for u in plan.uploads:
        w.writerow([u.shard, u.slot, u.start, u.end])
    print(f"makespan {plan.makespan}", file=sys.stderr)


def _cmd_gradcheck(a):
    cfg = parse_config(a.config)
    model = load_checkpoint(a.model) if a.model else init_model(cfg.model)
    mc = model.config
    rng = np.random.default_rng(a.seed)
    T = min(mc.max_seq_len, a.len)
    toks = rng.integers(0, mc.vocab, size=(mc.num_domains, T + 1))
    inputs, targets, mask = lm_split(toks)
    report = grad_check(model, inputs, np.arange(mc.num_domains), targets, mask, a.coords, seed=a.seed)
    for line in report.lines():
        print(line)
    return 0 if report.max_rel_error < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rremoe", description=__doc__.split("\n", 1)[0])
    verbs = p.add_subparsers(dest="verb", required=True, metavar="verb")

    rre = verbs.add_parser("rre", help="routing tables").add_subparsers(dest="sub", required=True)
    t = rre.add_parser("table", help="build a routing table file")
    t.add_argument("--domains", type=int, required=True)
    t.add_argument("--layers", type=int, required=True)
    t.add_argument("--experts", type=int, required=True)
    t.add_argument("--vocab", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_rre_table)
    r = rre.add_parser("route", help="look up one token's expert")
    r.add_argument("--table", required=True)
    r.add_argument("--domain", type=int, required=True)
    r.add_argument("--layer", type=int, required=True)
    r.add_argument("--token", type=int, required=True)
    r.set_defaults(func=_cmd_rre_route)

    dp = verbs.add_parser("data", help="corpus formatting and instance files").add_subparsers(dest="sub", required=True)
    f = dp.add_parser("format", help="byte-tokenise and format one document per line")
    f.add_argument("--input", required=True)
    f.add_argument("--domain", type=int, required=True)
    f.add_argument("--kind", choices=data.DOMAIN_KINDS, default="mono")
    f.add_argument("--subtag", choices=("en", "cn", "python", "java"))
    f.add_argument("--vocab", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=_cmd_data_format)
    for name, func, helptext in (("pack", _cmd_data_pack, "pack formatted docs into fixed windows"),
                                 ("pad", _cmd_data_pad, "pad or truncate each formatted doc")):
        s = dp.add_parser(name, help=helptext)
        s.add_argument("--input", required=True, action="append")
        s.add_argument("--len", type=int, required=True)
        s.add_argument("--domains", type=int)
        s.add_argument("--out", required=True)
        if name == "pad":
            s.add_argument("--vocab", type=int, required=True)
        s.set_defaults(func=func)
    s = dp.add_parser("stats", help="summarise an instance file")
    s.add_argument("--input", required=True)
    s.add_argument("--vocab", type=int)
    s.set_defaults(func=_cmd_data_stats)
    s = dp.add_parser("synth", help="write a synthetic multi-domain corpus")
    s.add_argument("--domains", type=int, default=3)
    s.add_argument("--docs", type=int, default=200)
    s.add_argument("--base-vocab", type=int, default=24)
    s.add_argument("--vocab", type=int, required=True)
    s.add_argument("--len", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_data_synth)

    s = verbs.add_parser("train", help="train a freshly initialised model")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.add_argument("--stage-schedule")
    s.add_argument("--loss-csv")
    s.set_defaults(func=_cmd_train)

    s = verbs.add_parser("eval", help="per-domain loss of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--no-mask-pad", action="store_true")
    s.set_defaults(func=_cmd_eval)

    s = verbs.add_parser("init", help="write a freshly initialised checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_init)

    s = verbs.add_parser("inherit", help="initialise a sparse model from a dense donor")
    s.add_argument("--donor", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--donor-vocab")
    s.add_argument("--add-vocab")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_inherit)

    s = verbs.add_parser("extract", help="cut out a single-domain sub-model")
    s.add_argument("--model", required=True)
    s.add_argument("--domain", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_extract)

    cs = verbs.add_parser("commsim", help="communication and upload simulation").add_subparsers(dest="sub", required=True)
    s = cs.add_parser("volume", help="global vs grouped all-to-all bytes")
    s.add_argument("--devices", type=int, required=True)
    s.add_argument("--groups", type=int, required=True)
    s.add_argument("--tokens", type=int, default=100_000)
    s.add_argument("--hist")
    s.add_argument("--domains", type=int)
    s.add_argument("--experts", type=int)
    s.add_argument("--hidden", type=int, default=1)
    s.add_argument("--element-bytes", type=int, default=4)
    s.add_argument("--mode", choices=("global", "grouped", "both"), default="both")
    s.add_argument("--method", choices=("analytic", "simulate", "both"), default="both")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_commsim_volume)
    s = cs.add_parser("upload", help="round-robin checkpoint upload schedule")
    s.add_argument("--shards", required=True)
    s.add_argument("--limit", type=int, required=True)
    s.add_argument("--bandwidth", type=float, default=1.0)
    s.set_defaults(func=_cmd_commsim_upload)

    s = verbs.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--config", required=True)
    s.add_argument("--model")
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--len", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_gradcheck)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        status = args.func(args)
    except (ConfigError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
