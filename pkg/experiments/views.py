from django.http import HttpResponse, JsonResponse
from django.shortcuts import get_object_or_404
from django.urls import reverse
from django.views.decorators.http import require_GET

from .models import ExperimentRun

# ============================================
# RECORDED RUNS (read-only)
# ============================================

@require_GET
def run_list(request):
    """Recorded runs, newest first; ?command= and ?passed= filter the list"""
    runs = ExperimentRun.objects.all()

    command = request.GET.get('command')
    if command:
        runs = runs.filter(command=command)

    passed = request.GET.get('passed')
    if passed in ('true', 'false'):
        runs = runs.filter(passed=passed == 'true')

    data = [
        {
            'id': run.pk,
            'command': run.command,
            'seed': run.seed,
            'emit': run.emit,
            'passed': run.passed,
            'failed_verdicts': run.failed_verdicts(),
            'created_at': run.created_at.isoformat(),
            'report_url': reverse('run_report', args=[run.pk]),
        }
        for run in runs
    ]
    return JsonResponse({'runs': data})


@require_GET
def run_report(request, pk):
    """The stored report, byte for byte, as a download"""
    run = get_object_or_404(ExperimentRun, pk=pk)
    response = HttpResponse(run.report, content_type=run.get_content_type())
    response['Content-Disposition'] = f'attachment; filename="{run.get_filename()}"'
    return response
