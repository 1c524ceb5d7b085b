"""``nestfhe`` command line: verify, counts, bench.

Exit codes: 0 success, 1 verification failure or count mismatch, 2 usage error.
Every option can also be set through a ``NESTFHE_<OPTION>`` environment variable.
"""

from __future__ import annotations

import json
import sys

import click

from .bench import ENCODINGS, LAYERS, WORKLOADS, WorkloadError, measure_counts, run_bench
from .ring import PRESET_NAMES, ParameterError, preset
from .verify import FAULTS, SUITES, TOL_LAYER, inject_fault, run_suites

FORMATS = ("json", "csv", "table")


def _env(name: str) -> str:
    return f"NESTFHE_{name.upper()}"


def _set_threads(ctx, param, value):
    if value:
        import numba
        try:
            numba.set_num_threads(value)
        except ValueError as e:
            raise click.BadParameter(str(e), ctx, param) from None
    return value


def _warn_insecure(params) -> None:
    if not params.secure:
        click.secho(f"WARNING: preset {params.name!r} at N={params.ring_degree} is NOT a secure parameter "
                    f"set; numbers are for comparison only", fg="yellow", err=True)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--threads", type=click.IntRange(min=1), default=None, envvar=_env("threads"),
              callback=_set_threads, expose_value=False, is_eager=True,
              help="Worker threads for the compiled kernels.")
@click.version_option(package_name="artifact", prog_name="nestfhe")
def main():
    """Nested-encoding CKKS: self-checks, op counts and timing."""


@main.command()
@click.option("--suite", "suites", multiple=True, type=click.Choice(list(SUITES)), envvar=_env("suite"),
              help="Suite to run (repeatable); default all.")
@click.option("--ring-degree", type=int, default=1 << 10, show_default=True, envvar=_env("ring_degree"))
@click.option("--seed", type=int, default=0, show_default=True, envvar=_env("seed"))
@click.option("--inject-fault", "fault", type=click.Choice(FAULTS), default=None, hidden=True, envvar=_env("inject_fault"))
def verify(suites, ring_degree, seed, fault):
    """Oracle-equivalence and invariant suites."""
    _check_degree(ring_degree, "--ring-degree")
    with inject_fault(fault):
        rows = run_suites(suites, ring_degree, seed, echo=click.echo)
    failed = sorted({r.suite for r in rows if not r.ok})
    if failed:
        click.echo(f"FAILED suites: {', '.join(failed)}", err=True)
        sys.exit(1)
    click.echo(f"all {len(rows)} checks passed")


def _check_degree(n: int, flag: str):
    if n < 16 or n & (n - 1):
        raise click.BadParameter("must be a power of two >= 16", param_hint=flag)


@main.command()
@click.option("--layer", type=click.Choice(LAYERS), default="conv2d", show_default=True, envvar=_env("layer"))
@click.option("--encoding", "encodings", type=click.Choice(ENCODINGS + ("all",)), default="all", show_default=True,
              envvar=_env("encoding"))
@click.option("--channels", "-C", "channels", type=int, multiple=True, envvar=_env("channels"),
              help="Channels per ciphertext (repeatable); default 4, 16, 64.")
@click.option("--kernel-size", "-f", type=click.IntRange(min=1), default=3, show_default=True,
              envvar=_env("kernel_size"))
@click.option("--ring-degree", type=int, default=1 << 12, show_default=True, envvar=_env("ring_degree"))
@click.option("--seed", type=int, default=0, show_default=True, envvar=_env("seed"))
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="table", show_default=True,
              envvar=_env("format"))
def counts(layer, encodings, channels, kernel_size, ring_degree, seed, fmt):
    """Measured PMult / HRot / level / plaintext counts beside the closed forms."""
    _check_degree(ring_degree, "--ring-degree")
    encs = ENCODINGS if encodings == "all" else (encodings,)
    results = []
    for C in channels or (4, 16, 64):
        for enc in encs:
            try:
                results.append(measure_counts(layer, enc, C, kernel_size, ring_degree, seed=seed))
            except WorkloadError as e:
                raise click.BadParameter(str(e), param_hint="--channels") from None
    bad = [r for r in results if not r.match or r.rel_error >= TOL_LAYER]
    if fmt == "json":
        click.echo(json.dumps([r.to_dict() for r in results], indent=2))
    elif fmt == "csv":
        click.echo("layer,encoding,channels,metric,predicted,measured")
        for r in results:
            for k, v in r.predicted.items():
                click.echo(f"{r.layer},{r.encoding},{r.channels},{k},{v},{r.measured.get(k)}")
    else:
        click.echo(f"{'layer':<9}{'encoding':<12}{'C':>4}  {'metric':<11}{'predicted':>10}{'measured':>10}")
        for r in results:
            for k, v in r.predicted.items():
                got = r.measured.get(k)
                mark = "" if got == v else "  MISMATCH"
                click.echo(f"{r.layer:<9}{r.encoding:<12}{r.channels:>4}  {k:<11}{v:>10}{got!s:>10}{mark}")
            if "level_fused" in r.measured:
                click.echo(f"{'':<25}  level seq/fused {r.measured['level_sequential']}/{r.measured['level_fused']}")
            click.echo(f"{'':<25}  rel error {r.rel_error:.2e}")
    if bad:
        for r in bad:
            click.echo(f"mismatch: {r.layer}/{r.encoding} C={r.channels}: predicted {r.predicted}, "
                       f"measured {r.measured}, rel error {r.rel_error:.2e}", err=True)
        sys.exit(1)


@main.command()
@click.option("--preset", "preset_name", type=click.Choice(PRESET_NAMES, case_sensitive=False), default="desk",
              show_default=True, envvar=_env("preset"))
@click.option("--ring-degree", type=int, default=None, envvar=_env("ring_degree"),
              help="Override the preset's ring degree.")
@click.option("--layer", "workload", type=click.Choice(WORKLOADS), default="conv2d", show_default=True,
              envvar=_env("layer"))
@click.option("--encoding", type=click.Choice(ENCODINGS), default="nested", show_default=True,
              envvar=_env("encoding"))
@click.option("--channels", "-C", type=int, default=16, show_default=True, envvar=_env("channels"))
@click.option("--reps", type=click.IntRange(min=1), default=5, show_default=True, envvar=_env("reps"))
@click.option("--seed", type=int, default=0, show_default=True, envvar=_env("seed"))
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="table", show_default=True,
              envvar=_env("format"))
def bench(preset_name, ring_degree, workload, encoding, channels, reps, seed, fmt):
    """Time one deterministic workload and report its counters."""
    if ring_degree is not None:
        _check_degree(ring_degree, "--ring-degree")
    try:
        params = preset(preset_name, ring_degree)
    except ParameterError as e:
        raise click.BadParameter(str(e), param_hint="--preset") from None
    _warn_insecure(params)
    if workload == "bootstrap" and encoding != "nested":
        raise click.BadParameter("bootstrap only runs on nested ciphertexts", param_hint="--encoding")
    try:
        report = run_bench(workload, encoding, preset_name, ring_degree, channels, reps, seed)
    except WorkloadError as e:
        raise click.BadParameter(str(e), param_hint="--channels") from None
    click.echo({"json": report.to_json, "csv": report.to_csv, "table": report.to_table}[fmt]().rstrip("\n"))


if __name__ == "__main__":
    main()
