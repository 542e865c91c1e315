# experiments/models.py

from django.db import models


class ExperimentRun(models.Model):
    """
    Provenance of one recorded command run: the resolved config it ran with,
    the report it emitted and whether its verdicts held.
    """
    COMMAND_CHOICES = (
        ('codec_audit', 'Codec audit'),
        ('optim_ablate', 'Optimizer ablation'),
        ('optim_train', 'Optimizer training'),
        ('flow_sim', 'Precision flow simulation'),
        ('memory', 'Activation memory'),
    )

    EMIT_CHOICES = (
        ('csv', 'CSV'),
        ('json', 'JSON'),
    )

    command = models.CharField(
        max_length=20,
        choices=COMMAND_CHOICES,
        help_text="Management command that produced the report"
    )
    config = models.JSONField(
        help_text="Resolved configuration the command ran with"
    )
    seed = models.BigIntegerField(
        default=0,
        help_text="Base seed; every draw in the run derives from it"
    )
    emit = models.CharField(
        max_length=4,
        choices=EMIT_CHOICES,
        default='csv',
        help_text="Format of the stored report"
    )
    report = models.TextField(
        help_text="Report exactly as the command emitted it"
    )
    passed = models.BooleanField(
        default=True,
        help_text="False when any verdict of the run failed"
    )
    verdicts = models.JSONField(
        default=dict,
        blank=True,
        help_text="Named ordering checks and their outcome"
    )
    out_path = models.CharField(
        max_length=500,
        blank=True,
        help_text="File the report was written to, if any"
    )

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', '-id']
        verbose_name = 'Experiment Run'
        verbose_name_plural = 'Experiment Runs'
        indexes = [
            models.Index(fields=['command', '-created_at'], name='experiment_command_idx'),
        ]

    def __str__(self):
        outcome = 'pass' if self.passed else 'FAIL'
        return f"{self.get_command_display()} #{self.pk} ({outcome})"

    def get_content_type(self):
        """MIME type for serving the stored report"""
        return 'application/json' if self.emit == 'json' else 'text/csv'

    def get_filename(self):
        return f"{self.command}-{self.pk}.{self.emit}"

    def failed_verdicts(self):
        return sorted(name for name, held in self.verdicts.items() if not held)
