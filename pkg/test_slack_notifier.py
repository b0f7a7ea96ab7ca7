"""
Test Slack payloads without touching the network
"""

import pytest
import requests

from slack_notifier import SlackNotifier


class FakeResponse:
    def __init__(self, status_code: int):
        self.status_code = status_code


@pytest.fixture
def posts(monkeypatch):
    sent = []

    def fake_post(url, json=None, headers=None, timeout=None):
        sent.append({'url': url, 'json': json, 'timeout': timeout})
        return FakeResponse(200)

    monkeypatch.setattr(requests, 'post', fake_post)
    return sent


def test_run_finished_payload(posts):
    notifier = SlackNotifier('https://hooks.slack.invalid/T1', timeout=3.0)
    assert notifier.notify_run_finished('train', {'final_loss': 0.5, 'epochs': 10}, 'loss 2.1 -> 0.5')
    (post,) = posts
    assert post['url'] == 'https://hooks.slack.invalid/T1' and post['timeout'] == 3.0
    attachment = post['json']['attachments'][0]
    assert attachment['title'] == '✅ train finished'
    assert attachment['text'] == 'loss 2.1 -> 0.5'
    assert [(f['title'], f['value']) for f in attachment['fields']] == [('final_loss', '0.5'), ('epochs', '10')]


def test_error_payload(posts):
    SlackNotifier('https://hooks.slack.invalid/T1').notify_error('ParseError: no rule', context='roundtrip (run 4)')
    attachment = posts[0]['json']['attachments'][0]
    assert attachment['color'] == '#FF0000'
    assert [f['value'] for f in attachment['fields']] == ['ParseError: no rule', 'roundtrip (run 4)']


slack_failures = [
    {'outcome': FakeResponse(500), 'description': 'server error'},
    {'outcome': requests.ConnectionError('refused'), 'description': 'connection refused'},
    {'outcome': requests.Timeout('slow'), 'description': 'timeout'},
]


@pytest.mark.parametrize('case', slack_failures, ids=[c['description'] for c in slack_failures])
def test_failures_return_false(monkeypatch, capsys, case):
    def fake_post(url, **kwargs):
        if isinstance(case['outcome'], Exception):
            raise case['outcome']
        return case['outcome']

    monkeypatch.setattr(requests, 'post', fake_post)
    assert SlackNotifier('https://hooks.slack.invalid/T1').send_notification('t', 'm') is False
    if isinstance(case['outcome'], Exception):
        assert 'Error sending Slack notification' in capsys.readouterr().out
