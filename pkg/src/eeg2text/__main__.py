from eeg2text.cli import main

main()
