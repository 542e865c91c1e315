# experiments/management/commands/flow_sim.py

from experiments.forms import FlowSimForm
from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Forward error and saved bytes of the emulated decoder layer under each policy"
    form_class = FlowSimForm
    sweep_name = 'flow_sim'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--policy', help="Comma separated flow policies (default BF16,TE,COAT)")
        parser.add_argument('--granularity', help="per-group, per-block or both, comma separated")
        parser.add_argument('--format', help="FP8 format of activations and weights")
        parser.add_argument('--group-size', help="Comma separated activation group sizes")
        parser.add_argument('--seeds', help="Seeds averaged per cell")
        parser.add_argument('--hidden', help="Hidden size")
        parser.add_argument('--seq-len', help="Tokens per sequence")
