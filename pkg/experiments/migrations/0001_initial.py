# Generated by Django 4.2 on 2026-10-17 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('codec_audit', 'Codec audit'), ('optim_ablate', 'Optimizer ablation'), ('optim_train', 'Optimizer training'), ('flow_sim', 'Precision flow simulation'), ('memory', 'Activation memory')], help_text='Management command that produced the report', max_length=20)),
                ('config', models.JSONField(help_text='Resolved configuration the command ran with')),
                ('seed', models.BigIntegerField(default=0, help_text='Base seed; every draw in the run derives from it')),
                ('emit', models.CharField(choices=[('csv', 'CSV'), ('json', 'JSON')], default='csv', help_text='Format of the stored report', max_length=4)),
                ('report', models.TextField(help_text='Report exactly as the command emitted it')),
                ('passed', models.BooleanField(default=True, help_text='False when any verdict of the run failed')),
                ('verdicts', models.JSONField(blank=True, default=dict, help_text='Named ordering checks and their outcome')),
                ('out_path', models.CharField(blank=True, help_text='File the report was written to, if any', max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Experiment Run',
                'verbose_name_plural': 'Experiment Runs',
                'ordering': ['-created_at', '-id'],
                'indexes': [models.Index(fields=['command', '-created_at'], name='experiment_command_idx')],
            },
        ),
    ]
