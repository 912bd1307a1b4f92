# Command-line verbs of the lab
