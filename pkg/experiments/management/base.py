# experiments/management/base.py

import logging

from django.core.management.base import BaseCommand, CommandError

from numerics.exceptions import CoatSimError

from ..models import ExperimentRun
from ..reports import plain, write_report
from ..sweeps import SWEEPS

logger = logging.getLogger(__name__)


class ExperimentCommand(BaseCommand):
    """
    Resolve the config (defaults, --config file, flags), run the sweep, emit the report.
    Exit status: 0 when every verdict holds, 1 when one fails, 2 on a config error.
    """
    form_class = None
    sweep_name = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help="Flat key=value file; flags override its values")
        parser.add_argument('--seed', help="Base seed (default 0)")
        parser.add_argument('--emit', choices=['csv', 'json'], help="Report format (default csv)")
        parser.add_argument('--out', help="Write the report to this path instead of stdout")
        parser.add_argument('--threads', type=int,
                            help="Cap on parallel cells (default COATSIM_THREADS)")
        parser.add_argument('--record', action='store_true',
                            help="Store config, report and verdicts as an ExperimentRun")
        self.add_experiment_arguments(parser)

    def add_experiment_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        overrides = {name: options.get(name) for name in self.form_class.base_fields}
        try:
            config = self.form_class.resolve(options.get('config'), **overrides)
            logger.info("Running %s (seed %d)", self.sweep_name, config['seed'])
            report = SWEEPS[self.sweep_name](config, threads=options.get('threads'))
            text = report.render(config['emit'])
            if config['out']:
                write_report(text, config['out'])
        except CoatSimError as exc:
            raise CommandError(str(exc), returncode=2)

        if config['out']:
            self.stdout.write(self.style.SUCCESS(f"Report written to {config['out']}"))
        else:
            self.stdout.write(text, ending='')

        if options.get('record'):
            run = ExperimentRun.objects.create(
                command=self.sweep_name,
                config=plain(config),
                seed=config['seed'],
                emit=config['emit'],
                report=text,
                passed=report.passed,
                verdicts=report.verdicts,
                out_path=config['out'],
            )
            logger.info("Recorded %s", run)

        if not report.passed:
            raise CommandError(f"Verdicts failed: {', '.join(report.failed())}", returncode=1)
