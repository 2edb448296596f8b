import sys

from depthdiff.cli import main

sys.exit(main())
