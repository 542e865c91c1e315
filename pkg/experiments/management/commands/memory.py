# experiments/management/commands/memory.py

from experiments.forms import MemoryForm
from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Activation memory per operator for BF16, TE and COAT, in units of U"
    form_class = MemoryForm
    sweep_name = 'memory'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--policy', help="Comma separated policies (default BF16,TE,COAT)")
        parser.add_argument('--group-size', help="Activation group size used for scale bytes")
        parser.add_argument('--batch')
        parser.add_argument('--seq-len')
        parser.add_argument('--hidden')
        parser.add_argument('--intermediate')
        parser.add_argument('--include-scales', action='store_true', default=None,
                            help="Add scaling-factor bytes to the byte column")
