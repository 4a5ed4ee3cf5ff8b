# voxpipe: 胸部大動脈 CT のセグメンテーションと TAA 分類パイプライン
__version__ = "0.1.0"
