# experiments/management/commands/codec_audit.py

from experiments.forms import CodecAuditForm
from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Enumerate every code of each FP8 format: decode table, limits and round trips"
    form_class = CodecAuditForm
    sweep_name = 'codec_audit'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--format', help="Comma separated formats (default E4M3,E5M2,DE8)")
