# experiments/management/commands/optim_ablate.py

from experiments.forms import OptimAblateForm
from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Update-direction error for every first/second moment storage policy"
    form_class = OptimAblateForm
    sweep_name = 'optim_ablate'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--policy', help="Comma separated moment policies, e.g. E4M3,E4M3+Expand")
        parser.add_argument('--group-size', help="Optimizer group size")
        parser.add_argument('--seeds', help="Simulated moment pairs per cell")
        parser.add_argument('--size', help="Elements per simulated moment")
