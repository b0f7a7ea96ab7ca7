"""
Slack Integration for Notifications
Posts run results and failures of the MHG-GNN pipeline to a Slack webhook
"""

import requests
from typing import Dict, Optional
from datetime import datetime


class SlackNotifier:
    def __init__(self, webhook_url: str, timeout: float = 10.0):
        """
        Initialize Slack notifier

        Args:
            webhook_url: Slack incoming webhook URL
            timeout: seconds to wait for Slack before giving up
        """
        self.webhook_url = webhook_url
        self.timeout = timeout

    def send_notification(self, title: str, message: str,
                          color: str = "#36A64F",
                          fields: Optional[list] = None) -> bool:
        """
        Send an attachment message to Slack

        Returns:
            True if Slack accepted it; failures are printed, never raised
        """
        payload = {
            "attachments": [
                {
                    "color": color,
                    "title": title,
                    "text": message,
                    "fields": fields or [],
                    "footer": "MHG-GNN",
                    "ts": int(datetime.now().timestamp())
                }
            ]
        }

        try:
            response = requests.post(
                self.webhook_url,
                json=payload,
                headers={'Content-Type': 'application/json'},
                timeout=self.timeout
            )
            return response.status_code == 200
        except requests.RequestException as e:
            print(f"⚠️  Error sending Slack notification: {e}")
            return False

    def notify_run_finished(self, command: str, metrics: Dict[str, float],
                            summary: str = "") -> bool:
        fields = [
            {
                "title": name,
                "value": f"{value:g}" if isinstance(value, float) else str(value),
                "short": True
            }
            for name, value in metrics.items()
        ]

        return self.send_notification(
            title=f"✅ {command} finished",
            message=summary or f"The {command} run completed",
            color="#36A64F",
            fields=fields
        )

    def notify_error(self, error_message: str, context: str = "") -> bool:
        fields = [
            {
                "title": "Error",
                "value": error_message,
                "short": False
            }
        ]

        if context:
            fields.append({
                "title": "Context",
                "value": context,
                "short": False
            })

        return self.send_notification(
            title="❌ MHG-GNN Run Failed",
            message="A pipeline command stopped with an error",
            color="#FF0000",
            fields=fields
        )
