"""Command line entry points for running and exercising the service."""
from __future__ import annotations

import sys
from pathlib import Path

import click

from .service import Service, ServiceConfig, build_app


@click.group()
def main() -> None:
    """Consent authorization service tools."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def serve(config_path: str) -> None:
    """Run the HTTP service described by a config file."""
    import uvicorn

    config = ServiceConfig.from_file(Path(config_path))
    service = Service(config)
    app = build_app(service)
    host, _, port = config.listen_address.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))


@main.command()
@click.option("--fixture", "fixture_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", "data_dir", required=True, type=click.Path())
def seed(fixture_path: str, data_dir: str) -> None:
    """Load principals, patients, and records from a fixture file."""
    config = ServiceConfig(
        data_dir=Path(data_dir), clock_mode="simulated", harness=True
    )
    service = Service(config)
    service.seed_file(Path(fixture_path))
    click.echo(f"seeded from {fixture_path} into {data_dir}")


@main.group()
def scenario() -> None:
    """Scripted end-to-end scenarios."""


@scenario.command("run")
@click.argument("name")
def scenario_run(name: str) -> None:
    """Execute a named scenario and print pass or fail."""
    from .harness import run_scenario, scenario_names

    if name not in scenario_names():
        click.echo(f"unknown scenario: {name}", err=True)
        sys.exit(1)
    result = run_scenario(name)
    if result.passed:
        click.echo(f"{name}: pass")
        if result.grant_ttl_ms is not None:
            days = result.grant_ttl_ms / 86_400_000
            if days == int(days):
                click.echo(f"grant TTL = {int(days)} days")
            else:
                click.echo(f"grant TTL = {result.grant_ttl_ms} ms")
        sys.exit(0)
    click.echo(f"{name}: fail")
    for line in result.diffs:
        click.echo(f"  {line}")
    sys.exit(2)


@main.group()
def audit() -> None:
    """Audit log inspection."""


@audit.command("tail")
@click.option("--patient", "patient_id", required=True)
@click.option("--data-dir", "data_dir", required=True, type=click.Path(exists=True))
def audit_tail(patient_id: str, data_dir: str) -> None:
    """Print the patient-visible audit events for one patient."""
    from .audit import AuditLog
    from .persistence import AUDIT_FILE

    log = AuditLog.load(str(Path(data_dir) / AUDIT_FILE))
    for event in log.patient_view(patient_id):
        click.echo(event.to_line())


if __name__ == "__main__":
    main()
