#!/usr/bin/env python3
"""rpfnet – launch the allocation API."""
import uvicorn

from rpfnet.config import settings


def main():
    uvicorn.run(
        "rpfnet.app:app",
        host=settings.host,
        port=settings.port,
        reload=False,
    )


if __name__ == "__main__":
    main()
